"""Trained affine adapters for keys and values, plus their file format.

A key predictor maps the previous layer's reconstructed keys to the current
layer's keys (C -> C). A value predictor maps the concatenation
[previous reconstructed values ; current reconstructed keys] to the current
layer's values (2C -> C) - the ordering of those two halves is part of the
format and is pinned by a canary vector stored alongside each value
predictor.

File format "AQKV", little-endian:

    magic    4 bytes  b"AQKV"
    version  u16      1
    scheme   u8       0 = float32 payloads (other values reserved)
    hdr_len  u32      JSON header: geometry + calibration metadata
    per layer 1..L-1: key weight [C, C], key bias [C],
                      value weight [2C, C], value bias [C],
                      value canary output [C]   (all row-major float32)
    checksum u64      blake2b-64 of every preceding byte

A human-readable JSON sidecar (same path + ".json") duplicates the header.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, FormatError, GeometryError, IncompatiblePredictorsError
from .linalg import LinearMap

MAGIC = b"AQKV"
VERSION = 1
SCHEME_F32 = 0

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class LinearPredictor:
    kind: str  # "key" | "value"
    map: LinearMap

    def __post_init__(self):
        if self.kind not in ("key", "value"):
            raise ValueError(f"kind must be 'key' or 'value', got {self.kind!r}")

    @property
    def in_dim(self) -> int:
        return self.map.in_dim

    @property
    def out_dim(self) -> int:
        return self.map.out_dim


def predict(p: LinearPredictor, X) -> np.ndarray:
    """Apply a predictor row-wise; raises on input width mismatch."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != p.in_dim:
        raise GeometryError(
            f"{p.kind} predictor expects {p.in_dim} input columns, got shape {X.shape}"
        )
    return p.map.apply(X)


def canary_input(in_dim: int) -> np.ndarray:
    """Deterministic probe vector checked on load to pin input ordering."""
    rng = np.random.default_rng(np.random.PCG64(0xA95C ^ in_dim))
    return rng.standard_normal((1, in_dim), dtype=np.float32)


@dataclass
class PredictorSet:
    """Per-layer (key, value) predictor pairs for layers 1..L-1.

    Layer 0 is the anchor and never has predictors; ``pairs[i - 1]`` holds
    the predictors consuming layer ``i - 1`` reconstructions to produce
    layer ``i``.
    """

    n_layers: int
    n_kv_heads: int
    head_dim: int
    pairs: list[tuple[LinearPredictor, LinearPredictor]]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.kv_channels
        if len(self.pairs) != self.n_layers - 1:
            raise GeometryError(
                f"expected {self.n_layers - 1} predictor pairs, got {len(self.pairs)}"
            )
        for i, (kp, vp) in enumerate(self.pairs, start=1):
            if kp.kind != "key" or vp.kind != "value":
                raise GeometryError(f"layer {i} pair has wrong predictor kinds")
            if kp.in_dim != c or kp.out_dim != c:
                raise GeometryError(f"layer {i} key predictor is not {c}x{c}")
            if vp.in_dim != 2 * c or vp.out_dim != c:
                raise GeometryError(f"layer {i} value predictor is not {2 * c}x{c}")

    @property
    def kv_channels(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def geometry(self) -> tuple[int, int, int]:
        return (self.n_layers, self.n_kv_heads, self.head_dim)

    def key_predictor(self, layer: int) -> LinearPredictor:
        self._check_layer(layer)
        return self.pairs[layer - 1][0]

    def value_predictor(self, layer: int) -> LinearPredictor:
        self._check_layer(layer)
        return self.pairs[layer - 1][1]

    def _check_layer(self, layer: int):
        if not 1 <= layer < self.n_layers:
            raise GeometryError(
                f"layer {layer} has no predictors (valid: 1..{self.n_layers - 1})"
            )

    def param_count(self) -> int:
        return sum(
            kp.map.weight.size + kp.map.bias.size + vp.map.weight.size + vp.map.bias.size
            for kp, vp in self.pairs
        )

    def check_compatible(self, geometry: tuple[int, int, int]) -> None:
        if tuple(geometry) != self.geometry:
            raise IncompatiblePredictorsError(
                f"predictor set was trained for geometry {self.geometry}, "
                f"target has {tuple(geometry)}"
            )

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for kp, vp in self.pairs:
            for arr in (kp.map.weight, kp.map.bias, vp.map.weight, vp.map.bias):
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


def save_predictors(ps: PredictorSet, path) -> None:
    path = os.fspath(path)
    header = {
        "n_layers": ps.n_layers,
        "n_kv_heads": ps.n_kv_heads,
        "head_dim": ps.head_dim,
        "metadata": ps.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    h = hashlib.blake2b(digest_size=8)
    with open(path, "wb") as f:

        def emit(data: bytes):
            f.write(data)
            h.update(data)

        emit(MAGIC)
        emit(_U16.pack(VERSION))
        emit(bytes([SCHEME_F32]))
        emit(_U32.pack(len(header_bytes)))
        emit(header_bytes)
        for kp, vp in ps.pairs:
            for arr in (kp.map.weight, kp.map.bias, vp.map.weight, vp.map.bias):
                emit(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            canary = predict(vp, canary_input(vp.in_dim))[0]
            emit(np.ascontiguousarray(canary, dtype="<f4").tobytes())
        f.write(h.digest())

    sidecar = dict(header)
    sidecar["content_hash"] = ps.content_hash()
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_predictors(path) -> PredictorSet:
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 19 or raw[:4] != MAGIC:
        raise FormatError(f"not a predictor file: {path}")
    (version,) = _U16.unpack_from(raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported predictor file version {version}")
    scheme = raw[6]
    if scheme != SCHEME_F32:
        raise FormatError(f"unsupported predictor payload scheme {scheme}")
    stored = raw[-8:]
    if hashlib.blake2b(raw[:-8], digest_size=8).digest() != stored:
        raise ChecksumError(f"predictor file checksum mismatch: {path}")

    (hdr_len,) = _U32.unpack_from(raw, 7)
    off = 11
    try:
        header = json.loads(raw[off : off + hdr_len].decode("utf-8"))
        n_layers = int(header["n_layers"])
        n_kv_heads = int(header["n_kv_heads"])
        head_dim = int(header["head_dim"])
        metadata = dict(header.get("metadata", {}))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad predictor header: {exc}") from exc
    off += hdr_len

    c = n_kv_heads * head_dim
    pairs = []

    def take(count: int, shape) -> np.ndarray:
        nonlocal off
        nbytes = count * 4
        if off + nbytes > len(raw) - 8:
            raise FormatError("predictor payload truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += nbytes
        return np.ascontiguousarray(arr, dtype=np.float32)

    for layer in range(1, n_layers):
        kw = take(c * c, (c, c))
        kb = take(c, (c,))
        vw = take(2 * c * c, (2 * c, c))
        vb = take(c, (c,))
        canary = take(c, (c,))
        kp = LinearPredictor("key", LinearMap(kw, kb))
        vp = LinearPredictor("value", LinearMap(vw, vb))
        expected = predict(vp, canary_input(vp.in_dim))[0]
        if not np.allclose(canary, expected, rtol=1e-4, atol=1e-5):
            raise FormatError(
                f"layer {layer} value-predictor canary mismatch; the "
                "[values ; keys] input ordering was not preserved"
            )
        pairs.append((kp, vp))
    if off != len(raw) - 8:
        raise FormatError("trailing bytes after predictor payload")
    return PredictorSet(
        n_layers=n_layers,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
        pairs=pairs,
        metadata=metadata,
    )
