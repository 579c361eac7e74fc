"""KV trace container format, rotary utilities and the synthetic generator.

File format "KVT1", little-endian throughout:

    magic    4 bytes  b"KVT1"
    version  u16      1
    hdr_len  u32      length of the JSON metadata block
    header   bytes    JSON: layers, heads, head_dim, sequence lengths,
                      rope mode/theta, attention-stats flag, source string
    payload  per layer: K then V, row-major float32 [n_tokens, kv_channels]
    stats    optional: per-layer float32 [n_tokens] accumulated attention
    checksum u64      blake2b-64 of every preceding byte

The JSON header means external producers can emit the format with nothing
but a struct packer and a JSON encoder. Keys are stored pre-rotary by
default; the ``rope_mode`` metadata flag marks traces captured post-rotary.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ChecksumError, ConfigError, FormatError, GeometryError, TruncatedTraceError

MAGIC = b"KVT1"
VERSION = 1
ROPE_MODES = ("pre_rope", "post_rope")

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def _file_checksum(path, end: int) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        remaining = end
        while remaining:
            chunk = f.read(min(1 << 20, remaining))
            if not chunk:
                break
            h.update(chunk)
            remaining -= len(chunk)
    return h.digest()


@dataclass
class TraceMeta:
    n_layers: int
    n_kv_heads: int
    head_dim: int
    sequence_lengths: list[int]
    rope_mode: str = "pre_rope"
    rope_theta: float = 10000.0
    has_attention_stats: bool = False
    source: str = ""

    def __post_init__(self):
        if min(self.n_layers, self.n_kv_heads, self.head_dim) < 1:
            raise ConfigError("geometry dims must be >= 1")
        if not self.sequence_lengths or min(self.sequence_lengths) < 1:
            raise ConfigError("sequence lengths must be positive")
        if self.rope_mode not in ROPE_MODES:
            raise ConfigError(f"rope_mode must be one of {ROPE_MODES}")

    @property
    def kv_channels(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def n_tokens(self) -> int:
        return sum(self.sequence_lengths)

    @property
    def n_sequences(self) -> int:
        return len(self.sequence_lengths)

    @property
    def geometry(self) -> tuple[int, int, int]:
        return (self.n_layers, self.n_kv_heads, self.head_dim)

    def sequence_slices(self) -> list[slice]:
        out, start = [], 0
        for length in self.sequence_lengths:
            out.append(slice(start, start + length))
            start += length
        return out

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "sequence_lengths": list(self.sequence_lengths),
            "rope_mode": self.rope_mode,
            "rope_theta": self.rope_theta,
            "has_attention_stats": self.has_attention_stats,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceMeta":
        try:
            return cls(
                n_layers=int(d["n_layers"]),
                n_kv_heads=int(d["n_kv_heads"]),
                head_dim=int(d["head_dim"]),
                sequence_lengths=[int(x) for x in d["sequence_lengths"]],
                rope_mode=str(d.get("rope_mode", "pre_rope")),
                rope_theta=float(d.get("rope_theta", 10000.0)),
                has_attention_stats=bool(d.get("has_attention_stats", False)),
                source=str(d.get("source", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad trace header: {exc}") from exc


@dataclass
class KVTrace:
    meta: TraceMeta
    keys: list[np.ndarray]
    values: list[np.ndarray]
    attention_stats: np.ndarray | None = None  # [n_layers, n_tokens]

    def __post_init__(self):
        if len(self.keys) != self.meta.n_layers or len(self.values) != self.meta.n_layers:
            raise GeometryError("layer count does not match metadata")
        shape = (self.meta.n_tokens, self.meta.kv_channels)
        for i, (k, v) in enumerate(zip(self.keys, self.values)):
            if k.shape != shape or v.shape != shape:
                raise GeometryError(
                    f"layer {i} tensors have shape {k.shape}/{v.shape}, expected {shape}"
                )

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.keys[i], self.values[i]

    def subset_sequences(self, seq_ids) -> "KVTrace":
        """New trace holding only the given sequences, order preserved."""
        seq_ids = sorted(seq_ids)
        slices = self.meta.sequence_slices()
        rows = np.concatenate(
            [np.arange(slices[s].start, slices[s].stop) for s in seq_ids]
        )
        meta = TraceMeta(
            n_layers=self.meta.n_layers,
            n_kv_heads=self.meta.n_kv_heads,
            head_dim=self.meta.head_dim,
            sequence_lengths=[self.meta.sequence_lengths[s] for s in seq_ids],
            rope_mode=self.meta.rope_mode,
            rope_theta=self.meta.rope_theta,
            has_attention_stats=self.meta.has_attention_stats,
            source=self.meta.source,
        )
        stats = None
        if self.attention_stats is not None:
            stats = self.attention_stats[:, rows].copy()
        return KVTrace(
            meta=meta,
            keys=[k[rows].copy() for k in self.keys],
            values=[v[rows].copy() for v in self.values],
            attention_stats=stats,
        )

    def subset_tokens(self, kept_per_sequence: list[np.ndarray]) -> "KVTrace":
        """Restrict to kept token indices (local to each sequence), re-indexed."""
        slices = self.meta.sequence_slices()
        if len(kept_per_sequence) != len(slices):
            raise GeometryError("kept-set count does not match sequence count")
        rows = []
        lengths = []
        for sl, kept in zip(slices, kept_per_sequence):
            kept = np.sort(np.asarray(kept, dtype=np.int64))
            if kept.size and (kept[0] < 0 or kept[-1] >= sl.stop - sl.start):
                raise GeometryError("kept index out of range for its sequence")
            rows.append(kept + sl.start)
            lengths.append(int(kept.size))
        rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        meta = TraceMeta(
            n_layers=self.meta.n_layers,
            n_kv_heads=self.meta.n_kv_heads,
            head_dim=self.meta.head_dim,
            sequence_lengths=lengths,
            rope_mode=self.meta.rope_mode,
            rope_theta=self.meta.rope_theta,
            has_attention_stats=self.meta.has_attention_stats,
            source=self.meta.source,
        )
        stats = None
        if self.attention_stats is not None:
            stats = self.attention_stats[:, rows].copy()
        return KVTrace(
            meta=meta,
            keys=[k[rows].copy() for k in self.keys],
            values=[v[rows].copy() for v in self.values],
            attention_stats=stats,
        )


# ---------------------------------------------------------------------------
# reading / writing
# ---------------------------------------------------------------------------


def write_trace(trace: KVTrace, path) -> None:
    h = hashlib.blake2b(digest_size=8)

    def emit(f, data: bytes):
        f.write(data)
        h.update(data)

    header = json.dumps(trace.meta.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        emit(f, MAGIC)
        emit(f, _U16.pack(VERSION))
        emit(f, _U32.pack(len(header)))
        emit(f, header)
        for k, v in zip(trace.keys, trace.values):
            emit(f, np.ascontiguousarray(k, dtype="<f4").tobytes())
            emit(f, np.ascontiguousarray(v, dtype="<f4").tobytes())
        if trace.meta.has_attention_stats:
            if trace.attention_stats is None:
                raise ConfigError("metadata promises attention stats but none given")
            emit(f, np.ascontiguousarray(trace.attention_stats, dtype="<f4").tobytes())
        f.write(h.digest())


class TraceReader:
    """Random access to one trace file, one layer at a time.

    The whole file is checksummed once on open; individual layers are then
    read on demand, so a calibration pass never needs more than a couple of
    layers in memory.
    """

    def __init__(self, path, validate: bool = True):
        self.path = os.fspath(path)
        size = os.path.getsize(self.path)
        self._f = open(self.path, "rb")
        try:
            head = self._f.read(10)
            if len(head) < 10 or head[:4] != MAGIC:
                raise FormatError(f"not a KVT1 trace file: {self.path}")
            (version,) = _U16.unpack_from(head, 4)
            if version != VERSION:
                raise FormatError(f"unsupported trace version {version}")
            (hdr_len,) = _U32.unpack_from(head, 6)
            hdr = self._f.read(hdr_len)
            if len(hdr) < hdr_len:
                raise FormatError("trace header truncated")
            try:
                self.meta = TraceMeta.from_dict(json.loads(hdr.decode("utf-8")))
            except json.JSONDecodeError as exc:
                raise FormatError(f"trace header is not valid JSON: {exc}") from exc

            self._layer_bytes = self.meta.n_tokens * self.meta.kv_channels * 4
            self._payload_start = 10 + hdr_len
            stats_bytes = (
                self.meta.n_layers * self.meta.n_tokens * 4
                if self.meta.has_attention_stats
                else 0
            )
            body_end = (
                self._payload_start
                + 2 * self.meta.n_layers * self._layer_bytes
                + stats_bytes
            )
            if size < body_end:
                layers_end = self._payload_start + 2 * self.meta.n_layers * self._layer_bytes
                if size >= layers_end:
                    raise FormatError("attention stats payload truncated")
                layer = max(
                    0,
                    min(
                        self.meta.n_layers - 1,
                        (size - self._payload_start) // (2 * self._layer_bytes),
                    ),
                )
                raise TruncatedTraceError(int(layer))
            if size < body_end + 8:
                raise FormatError("trace checksum missing")
            self._stats_start = body_end - stats_bytes
            if validate:
                self._f.seek(body_end)
                stored = self._f.read(8)
                if _file_checksum(self.path, body_end) != stored:
                    raise ChecksumError(f"trace checksum mismatch: {self.path}")
        except Exception:
            self._f.close()
            raise

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read_matrix(self, offset: int, what: str) -> np.ndarray:
        self._f.seek(offset)
        buf = self._f.read(self._layer_bytes)
        arr = np.frombuffer(buf, dtype="<f4").reshape(
            self.meta.n_tokens, self.meta.kv_channels
        )
        if not np.isfinite(arr).all():
            raise FormatError(f"{what} payload contains non-finite values")
        return arr.copy()

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= i < self.meta.n_layers:
            raise GeometryError(f"layer {i} out of range")
        base = self._payload_start + 2 * i * self._layer_bytes
        return (
            self._read_matrix(base, f"layer {i} keys"),
            self._read_matrix(base + self._layer_bytes, f"layer {i} values"),
        )

    def attention_stats(self) -> np.ndarray | None:
        if not self.meta.has_attention_stats:
            return None
        self._f.seek(self._stats_start)
        buf = self._f.read(self.meta.n_layers * self.meta.n_tokens * 4)
        return (
            np.frombuffer(buf, dtype="<f4")
            .reshape(self.meta.n_layers, self.meta.n_tokens)
            .copy()
        )

    def read_all(self) -> KVTrace:
        keys, values = [], []
        for i in range(self.meta.n_layers):
            k, v = self.layer(i)
            keys.append(k)
            values.append(v)
        return KVTrace(
            meta=self.meta,
            keys=keys,
            values=values,
            attention_stats=self.attention_stats(),
        )


def read_trace(path) -> KVTrace:
    with TraceReader(path) as r:
        return r.read_all()


# ---------------------------------------------------------------------------
# rotary position transform
# ---------------------------------------------------------------------------


def apply_rope(K, positions, head_dim: int, theta: float = 10000.0, inverse: bool = False):
    """Rotate key channel pairs (2j, 2j+1) by angle pos * theta^(-2j/head_dim).

    Keys are laid out head-major: [tokens, n_heads * head_dim]. Position 0 is
    the identity; ``inverse=True`` rotates by the negated angle, undoing a
    forward application exactly (rotations are isometries).
    """
    K = as_matrix_f32(K)
    if head_dim % 2:
        raise ConfigError("head_dim must be even for rotary pairs")
    n_tokens, channels = K.shape
    if channels % head_dim:
        raise GeometryError("channel count is not a multiple of head_dim")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (n_tokens,):
        raise GeometryError("positions must have one entry per token")

    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = positions[:, None] * inv_freq[None, :]
    if inverse:
        angles = -angles
    cos = np.cos(angles)
    sin = np.sin(angles)

    heads = K.reshape(n_tokens, channels // head_dim, half, 2).astype(np.float64)
    even = heads[..., 0]
    odd = heads[..., 1]
    out = np.empty_like(heads)
    out[..., 0] = even * cos[:, None, :] - odd * sin[:, None, :]
    out[..., 1] = even * sin[:, None, :] + odd * cos[:, None, :]
    return out.reshape(n_tokens, channels).astype(np.float32)


def inverse_rope(K, positions, head_dim: int, theta: float = 10000.0):
    return apply_rope(K, positions, head_dim, theta, inverse=True)


def sequence_positions(meta: TraceMeta) -> np.ndarray:
    """Within-sequence position of every row of a trace."""
    return np.concatenate([np.arange(n) for n in meta.sequence_lengths])


def as_matrix_f32(a) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# synthetic residual-stream traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Generator for traces with a controllable residual-stream structure.

    Per token, a hidden state walks through layers as
    ``h_{l+1} = h_l + alpha * tanh(h_l @ W_l)``; keys and values are linear
    projections of the hidden state plus N(0, noise^2) observation noise.
    Key projections are shared across layers, so keys inherit the full
    layer-to-layer continuity of the hidden stream; value projections are
    remixed per layer by ``value_mix``, which makes values strictly harder
    to predict from the previous layer than keys. The first ``sink_tokens``
    rows of every sequence are scaled by ``sink_scale`` to mimic
    attention-sink outliers.
    """

    n_layers: int = 6
    n_kv_heads: int = 4
    head_dim: int = 32
    hidden_dim: int | None = None  # default: 2 * kv_channels
    alpha: float = 0.3
    noise: float = 0.2
    value_mix: float = 0.6
    tokens_per_sequence: int = 1024
    n_sequences: int = 6
    sink_tokens: int = 4
    sink_scale: float = 4.0
    attention_stats: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must be in (0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.n_layers < 2:
            raise ConfigError("need at least 2 layers")

    @property
    def kv_channels(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else 2 * self.kv_channels


def synth_trace(cfg: SynthConfig) -> KVTrace:
    """Deterministic synthetic trace; identical bytes for identical configs."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    H, C, L = cfg.hidden, cfg.kv_channels, cfg.n_layers
    scale = np.float32(1.0 / math.sqrt(H))

    step_weights = [
        rng.standard_normal((H, H), dtype=np.float32) * scale for _ in range(L - 1)
    ]
    key_proj = rng.standard_normal((H, C), dtype=np.float32) * scale
    value_base = rng.standard_normal((H, C), dtype=np.float32) * scale
    mix_norm = np.float32(1.0 / math.sqrt(1.0 + cfg.value_mix**2))
    value_projs = []
    for _ in range(L):
        remix = rng.standard_normal((H, C), dtype=np.float32) * scale
        value_projs.append((value_base + np.float32(cfg.value_mix) * remix) * mix_norm)

    total = cfg.tokens_per_sequence * cfg.n_sequences
    hidden = rng.standard_normal((total, H), dtype=np.float32)

    keys, values = [], []
    h = hidden
    for layer in range(L):
        k = h @ key_proj
        v = h @ value_projs[layer]
        if cfg.noise > 0:
            k = k + cfg.noise * rng.standard_normal((total, C), dtype=np.float32)
            v = v + cfg.noise * rng.standard_normal((total, C), dtype=np.float32)
        keys.append(np.ascontiguousarray(k, dtype=np.float32))
        values.append(np.ascontiguousarray(v, dtype=np.float32))
        if layer < L - 1:
            h = h + np.float32(cfg.alpha) * np.tanh(h @ step_weights[layer])

    meta = TraceMeta(
        n_layers=L,
        n_kv_heads=cfg.n_kv_heads,
        head_dim=cfg.head_dim,
        sequence_lengths=[cfg.tokens_per_sequence] * cfg.n_sequences,
        rope_mode="pre_rope",
        has_attention_stats=cfg.attention_stats,
        source=f"synth(seed={cfg.seed})",
    )

    if cfg.sink_tokens > 0 and cfg.sink_scale != 1.0:
        for sl in meta.sequence_slices():
            stop = min(sl.start + cfg.sink_tokens, sl.stop)
            for layer in range(L):
                keys[layer][sl.start : stop] *= np.float32(cfg.sink_scale)
                values[layer][sl.start : stop] *= np.float32(cfg.sink_scale)

    stats = None
    if cfg.attention_stats:
        stats = np.empty((L, total), dtype=np.float32)
        for layer in range(L):
            for sl in meta.sequence_slices():
                n = sl.stop - sl.start
                logits = rng.standard_normal(n, dtype=np.float32)
                boost = min(cfg.sink_tokens, n)
                logits[:boost] += 6.0  # sinks accumulate most of the mass
                e = np.exp(logits - logits.max())
                stats[layer, sl] = (e / e.sum()) * n
    return KVTrace(meta=meta, keys=keys, values=values, attention_stats=stats)
