"""Streaming compressed KV cache: sinks, recent buffer, residual segments.

Layout per layer: the first ``sink_tokens`` of the stream are stored exactly,
the newest tokens sit uncompressed in a buffer shared across layers, and
everything in between lives in quantized segments of ``recent_buffer`` tokens
each. A flush encodes the buffered tokens layer by layer in ascending order:
layer 0 is quantized directly (at ``first_layer_bits``); every later layer
quantizes only the residual against its predictor's guess from the previous
layer's reconstruction. Decoding walks layers in the same order, so at most
one layer of decoded segments ever needs to be materialized.

Every token position is stored in exactly one of {sink, segment, buffer},
and flush boundaries depend only on token counts, never on how callers
batched their appends.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    ConfigError,
    ContractViolationError,
    FormatError,
    GeometryError,
)
from .predictor import PredictorSet, predict
from .quantizer import (
    BackboneConfig,
    FootprintSpec,
    QuantizedBlock,
    UniformConfig,
    VQConfig,
    backbone_at_bits,
    dequantize,
    quantize,
)
from .report import EvalReport, stamp
from .trace_io import KVTrace, TraceMeta

CACHE_MAGIC = b"AQKC"
CACHE_VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class CacheConfig:
    backbone: BackboneConfig
    sink_tokens: int = 4
    recent_buffer: int = 128
    first_layer_bits: int | None = 4
    first_layer_uncompressed: bool = False
    predictors: PredictorSet | None = None
    predictor_amortize_sequences: int = 1

    def __post_init__(self):
        if self.recent_buffer < 1:
            raise ConfigError("recent_buffer must be >= 1")
        if self.sink_tokens < 0:
            raise ConfigError("sink_tokens must be >= 0")

    def first_layer_backbone(self) -> BackboneConfig:
        if self.first_layer_uncompressed:
            return None
        return backbone_at_bits(self.backbone, self.first_layer_bits)

    def to_dict(self) -> dict:
        return {
            "backbone": backbone_to_dict(self.backbone),
            "sink_tokens": self.sink_tokens,
            "recent_buffer": self.recent_buffer,
            "first_layer_bits": self.first_layer_bits,
            "first_layer_uncompressed": self.first_layer_uncompressed,
            "predictors": None
            if self.predictors is None
            else self.predictors.content_hash(),
            "predictor_amortize_sequences": self.predictor_amortize_sequences,
        }


def backbone_to_dict(cfg: BackboneConfig) -> dict | None:
    if cfg is None:
        return None
    if isinstance(cfg, UniformConfig):
        return {
            "kind": "uniform",
            "bits": cfg.bits,
            "group_size": cfg.group_size,
            "axis": cfg.axis,
        }
    return {
        "kind": "vq",
        "d": cfg.d,
        "n": cfg.n,
        "group_size": cfg.group_size,
        "seed": cfg.seed,
    }


def backbone_from_dict(d: dict | None) -> BackboneConfig:
    if d is None:
        return None
    if d["kind"] == "uniform":
        return UniformConfig(bits=d["bits"], group_size=d["group_size"], axis=d["axis"])
    if d["kind"] == "vq":
        return VQConfig(d=d["d"], n=d["n"], group_size=d["group_size"], seed=d["seed"])
    raise FormatError(f"unknown backbone kind {d.get('kind')!r}")


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


def encode_block(
    layer: int,
    K,
    V,
    khat_prev: np.ndarray | None,
    vhat_prev: np.ndarray | None,
    config: CacheConfig,
) -> tuple[QuantizedBlock, QuantizedBlock]:
    """Quantize one token range of one layer.

    Layer 0 quantizes keys and values directly with the first-layer
    backbone. Later layers quantize residuals against the predictor output;
    the key reconstruction feeding the value predictor is recomputed through
    the same dequantize path the decoder uses, so encode and decode agree
    bit for bit.
    """
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    if K.shape != V.shape:
        raise GeometryError(f"key/value shape mismatch: {K.shape} vs {V.shape}")
    if layer == 0 or config.predictors is None:
        backbone = config.first_layer_backbone() if layer == 0 else config.backbone
        return quantize(K, backbone), quantize(V, backbone)

    if khat_prev is None or vhat_prev is None:
        raise GeometryError(
            f"layer {layer} encode requires previous-layer reconstructions"
        )
    if khat_prev.shape != K.shape or vhat_prev.shape != V.shape:
        raise GeometryError("previous-layer reconstruction shape mismatch")

    f_key = config.predictors.key_predictor(layer)
    f_value = config.predictors.value_predictor(layer)
    k_pred = predict(f_key, khat_prev)
    k_q = quantize(K - k_pred, config.backbone)
    khat = dequantize(k_q) + k_pred
    v_pred = predict(f_value, np.hstack([vhat_prev, khat]))
    v_q = quantize(V - v_pred, config.backbone)
    return k_q, v_q


def decode_block(
    layer: int,
    k_q: QuantizedBlock,
    v_q: QuantizedBlock,
    khat_prev: np.ndarray | None,
    vhat_prev: np.ndarray | None,
    config: CacheConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct one token range of one layer from its quantized blocks."""
    if layer == 0 or config.predictors is None:
        return dequantize(k_q), dequantize(v_q)
    if khat_prev is None or vhat_prev is None:
        raise GeometryError(
            f"layer {layer} decode requires previous-layer reconstructions"
        )
    f_key = config.predictors.key_predictor(layer)
    f_value = config.predictors.value_predictor(layer)
    khat = dequantize(k_q) + predict(f_key, khat_prev)
    vhat = dequantize(v_q) + predict(f_value, np.hstack([vhat_prev, khat]))
    return khat, vhat


# ---------------------------------------------------------------------------
# the cache
# ---------------------------------------------------------------------------


@dataclass
class Segment:
    start: int  # absolute token position, inclusive
    stop: int  # exclusive
    key_block: QuantizedBlock
    value_block: QuantizedBlock


@dataclass
class LayerStore:
    sink_k: np.ndarray
    sink_v: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def segment_tokens(self) -> int:
        return sum(seg.stop - seg.start for seg in self.segments)


class CompressedKVCache:
    """Single-writer streaming store for one token sequence.

    ``append_tokens`` and ``finalize`` mutate state and must be externally
    serialized; reconstruction passes are read-only.
    """

    def __init__(self, n_layers: int, kv_channels: int, config: CacheConfig):
        if config.predictors is not None:
            if config.predictors.n_layers != n_layers or (
                config.predictors.kv_channels != kv_channels
            ):
                raise GeometryError(
                    "predictor geometry does not match cache geometry"
                )
        self.n_layers = n_layers
        self.kv_channels = kv_channels
        self.config = config
        empty = np.empty((0, kv_channels), dtype=np.float32)
        self.layers = [LayerStore(empty.copy(), empty.copy()) for _ in range(n_layers)]
        self._buffer_k = [[] for _ in range(n_layers)]
        self._buffer_v = [[] for _ in range(n_layers)]
        self._buffer_len = 0
        self.n_tokens = 0

    # -- writing ---------------------------------------------------------

    def append_tokens(self, keys: list[np.ndarray], values: list[np.ndarray]) -> None:
        """Append ``t`` new tokens for every layer, flushing full buffers."""
        if len(keys) != self.n_layers or len(values) != self.n_layers:
            raise GeometryError("per-layer tensor count does not match layer count")
        t = keys[0].shape[0]
        for k, v in zip(keys, values):
            if k.shape != (t, self.kv_channels) or v.shape != (t, self.kv_channels):
                raise GeometryError(
                    f"expected [{t}, {self.kv_channels}] per layer, got {k.shape}/{v.shape}"
                )
        if t < 1:
            raise GeometryError("append needs at least one token")

        take_sink = max(0, min(self.config.sink_tokens - self.n_tokens, t))
        if take_sink:
            for i in range(self.n_layers):
                store = self.layers[i]
                store.sink_k = np.vstack([store.sink_k, keys[i][:take_sink]])
                store.sink_v = np.vstack([store.sink_v, values[i][:take_sink]])
        if take_sink < t:
            for i in range(self.n_layers):
                self._buffer_k[i].append(
                    np.array(keys[i][take_sink:], dtype=np.float32)
                )
                self._buffer_v[i].append(
                    np.array(values[i][take_sink:], dtype=np.float32)
                )
            self._buffer_len += t - take_sink
        self.n_tokens += t

        while self._buffer_len >= self.config.recent_buffer:
            self._flush(self.config.recent_buffer)

    def finalize(self) -> None:
        """Flush whatever remains in the buffer as one short segment."""
        if self._buffer_len:
            self._flush(self._buffer_len)

    def _flush(self, count: int) -> None:
        start = self.n_tokens - self._buffer_len
        khat_prev = vhat_prev = None
        for i in range(self.n_layers):
            k_all = np.vstack(self._buffer_k[i]) if len(self._buffer_k[i]) > 1 else self._buffer_k[i][0]
            v_all = np.vstack(self._buffer_v[i]) if len(self._buffer_v[i]) > 1 else self._buffer_v[i][0]
            k_seg, k_rest = k_all[:count], k_all[count:]
            v_seg, v_rest = v_all[:count], v_all[count:]
            k_q, v_q = encode_block(i, k_seg, v_seg, khat_prev, vhat_prev, self.config)
            self.layers[i].segments.append(
                Segment(start, start + count, k_q, v_q)
            )
            khat_prev, vhat_prev = decode_block(
                i, k_q, v_q, khat_prev, vhat_prev, self.config
            )
            self._buffer_k[i] = [k_rest] if k_rest.size else []
            self._buffer_v[i] = [v_rest] if v_rest.size else []
        self._buffer_len -= count

    # -- reading ---------------------------------------------------------

    def buffer_tokens(self) -> int:
        return self._buffer_len

    def start_reconstruction(self) -> "ReconstructionPass":
        return ReconstructionPass(self)

    def reconstruct_all(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Reconstructions for every layer, in token order.

        Materializes all layers; iterate a :class:`ReconstructionPass`
        yourself to hold only one layer at a time.
        """
        rp = self.start_reconstruction()
        return [rp.layer(i) for i in range(self.n_layers)]

    def _buffer_arrays(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        empty = np.empty((0, self.kv_channels), dtype=np.float32)
        k = np.vstack(self._buffer_k[i]) if self._buffer_k[i] else empty
        v = np.vstack(self._buffer_v[i]) if self._buffer_v[i] else empty
        return k, v

    # -- accounting ------------------------------------------------------

    def stored_bits(self, include_predictors: bool = True) -> int:
        """Bits held right now: segments at their coded size, the sink and
        buffer regions at the nominal 16 bits/value of uncompressed entries,
        predictor parameters at 32 bits each (amortized per config).

        Pass ``include_predictors=False`` when aggregating several caches
        that share one predictor set, and charge it once at the call site.
        """
        bits = 0
        for store in self.layers:
            bits += 16 * 2 * store.sink_k.shape[0] * self.kv_channels
            for seg in store.segments:
                bits += seg.key_block.stored_bits() + seg.value_block.stored_bits()
        bits += 16 * 2 * self._buffer_len * self.kv_channels * self.n_layers
        if include_predictors:
            bits += self.predictor_bits()
        return bits

    def predictor_bits(self) -> int:
        if self.config.predictors is None:
            return 0
        return (
            32
            * self.config.predictors.param_count()
            // self.config.predictor_amortize_sequences
        )

    def effective_bits(self) -> float:
        if self.n_tokens == 0:
            raise ConfigError("cache holds no tokens")
        values = 2 * self.n_layers * self.n_tokens * self.kv_channels
        return self.stored_bits() / values

    # -- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "n_layers": self.n_layers,
            "kv_channels": self.kv_channels,
            "n_tokens": self.n_tokens,
            "buffer_tokens": self._buffer_len,
            "config": self.config.to_dict(),
            "segments": [
                [seg.start, seg.stop] for seg in self.layers[0].segments
            ],
        }
        hdr = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [CACHE_MAGIC, _U16.pack(CACHE_VERSION), _U32.pack(len(hdr)), hdr]
        for i, store in enumerate(self.layers):
            parts.append(np.ascontiguousarray(store.sink_k, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(store.sink_v, dtype="<f4").tobytes())
            for seg in store.segments:
                parts.append(seg.key_block.to_bytes())
                parts.append(seg.value_block.to_bytes())
            bk, bv = self._buffer_arrays(i)
            parts.append(np.ascontiguousarray(bk, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(bv, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + hashlib.blake2b(body, digest_size=8).digest()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, predictors: PredictorSet | None = None) -> "CompressedKVCache":
        if len(buf) < 18 or buf[:4] != CACHE_MAGIC:
            raise FormatError("not a cache file")
        if hashlib.blake2b(buf[:-8], digest_size=8).digest() != buf[-8:]:
            raise ChecksumError("cache checksum mismatch")
        (version,) = _U16.unpack_from(buf, 4)
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported cache version {version}")
        (hdr_len,) = _U32.unpack_from(buf, 6)
        off = 10
        header = json.loads(buf[off : off + hdr_len].decode("utf-8"))
        off += hdr_len

        cfg_d = header["config"]
        stored_hash = cfg_d.get("predictors")
        if stored_hash is not None:
            if predictors is None:
                raise FormatError(
                    "cache was built with predictors; pass the matching set to load it"
                )
            if predictors.content_hash() != stored_hash:
                raise IncompatibleHash(stored_hash, predictors.content_hash())
        config = CacheConfig(
            backbone=backbone_from_dict(cfg_d["backbone"]),
            sink_tokens=cfg_d["sink_tokens"],
            recent_buffer=cfg_d["recent_buffer"],
            first_layer_bits=cfg_d["first_layer_bits"],
            first_layer_uncompressed=cfg_d["first_layer_uncompressed"],
            predictors=predictors if stored_hash is not None else None,
            predictor_amortize_sequences=cfg_d["predictor_amortize_sequences"],
        )
        cache = cls(header["n_layers"], header["kv_channels"], config)
        cache.n_tokens = header["n_tokens"]
        cache._buffer_len = header["buffer_tokens"]
        c = cache.kv_channels
        sink = min(config.sink_tokens, cache.n_tokens)

        def take_f32(rows: int) -> np.ndarray:
            nonlocal off
            nbytes = rows * c * 4
            if off + nbytes > len(buf) - 8:
                raise FormatError("cache payload truncated")
            arr = np.frombuffer(buf, dtype="<f4", count=rows * c, offset=off)
            off += nbytes
            return np.ascontiguousarray(arr.reshape(rows, c), dtype=np.float32)

        for i in range(cache.n_layers):
            store = cache.layers[i]
            store.sink_k = take_f32(sink)
            store.sink_v = take_f32(sink)
            seg_cfg = config.first_layer_backbone() if i == 0 else config.backbone
            for seg_start, seg_stop in header["segments"]:
                kb, used = QuantizedBlock.from_bytes(buf[off:], seg_cfg)
                off += used
                vb, used = QuantizedBlock.from_bytes(buf[off:], seg_cfg)
                off += used
                store.segments.append(Segment(seg_start, seg_stop, kb, vb))
            bk = take_f32(cache._buffer_len)
            bv = take_f32(cache._buffer_len)
            cache._buffer_k[i] = [bk] if bk.size else []
            cache._buffer_v[i] = [bv] if bv.size else []
        return cache


class IncompatibleHash(FormatError):
    def __init__(self, stored, given):
        super().__init__(
            f"cache references predictor set {stored}, got {given}"
        )


class ReconstructionPass:
    """Strictly ascending layer-by-layer reconstruction over a cache.

    Layer ``i`` segments decode against layer ``i - 1`` reconstructions, so
    layers must be requested in order 0, 1, 2, ...; anything else raises
    :class:`ContractViolationError`. Only the previous layer is retained.
    """

    def __init__(self, cache: CompressedKVCache):
        self._cache = cache
        self._expected = 0
        self._prev: tuple[np.ndarray, np.ndarray] | None = None

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i != self._expected:
            raise ContractViolationError(
                f"reconstruction pass expected layer {self._expected}, got {i}"
            )
        cache = self._cache
        store = cache.layers[i]
        sink = store.sink_k.shape[0]
        khat = np.empty((cache.n_tokens, cache.kv_channels), dtype=np.float32)
        vhat = np.empty_like(khat)
        khat[:sink] = store.sink_k
        vhat[:sink] = store.sink_v
        for seg in store.segments:
            if self._prev is None:
                kh, vh = decode_block(i, seg.key_block, seg.value_block, None, None, cache.config)
            else:
                kh, vh = decode_block(
                    i,
                    seg.key_block,
                    seg.value_block,
                    self._prev[0][seg.start : seg.stop],
                    self._prev[1][seg.start : seg.stop],
                    cache.config,
                )
            khat[seg.start : seg.stop] = kh
            vhat[seg.start : seg.stop] = vh
        bk, bv = cache._buffer_arrays(i)
        if bk.shape[0]:
            khat[cache.n_tokens - bk.shape[0] :] = bk
            vhat[cache.n_tokens - bv.shape[0] :] = bv
        self._prev = (khat, vhat)
        self._expected += 1
        return khat, vhat


def reconstruct_layer(cache: CompressedKVCache, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Convenience wrapper running a fresh pass up to ``layer`` (O(layer) decodes)."""
    rp = cache.start_reconstruction()
    out = None
    for i in range(layer + 1):
        out = rp.layer(i)
    return out


# ---------------------------------------------------------------------------
# trace replay
# ---------------------------------------------------------------------------


def replay_trace(
    trace: KVTrace,
    config: CacheConfig,
    chunk_tokens: int = 128,
    finalize: bool = True,
    return_caches: bool = False,
):
    """Stream a trace through caches (one per sequence) and score the result.

    Reports per-layer and pooled explained variance for keys and values,
    mean-squared and maximum absolute reconstruction error, the effective
    bits/value of the stored caches, and encode/decode throughput.
    """
    if chunk_tokens < 1:
        raise ConfigError("chunk_tokens must be >= 1")
    meta = trace.meta
    if config.predictors is not None:
        config.predictors.check_compatible(meta.geometry)
        rope = config.predictors.metadata.get("rope_mode")
        if rope is not None and rope != meta.rope_mode:
            raise ConfigError(
                f"predictors were calibrated {rope}, trace is {meta.rope_mode}"
            )
    L, C = meta.n_layers, meta.kv_channels

    sse_k = np.zeros(L)
    sse_v = np.zeros(L)
    var_k = np.zeros(L)
    var_v = np.zeros(L)
    max_err = 0.0
    rows_total = 0
    encode_s = decode_s = 0.0
    caches = []

    for sl in meta.sequence_slices():
        cache = CompressedKVCache(L, C, config)
        t0 = time.perf_counter()
        for start in range(sl.start, sl.stop, chunk_tokens):
            stop = min(start + chunk_tokens, sl.stop)
            cache.append_tokens(
                [k[start:stop] for k in trace.keys],
                [v[start:stop] for v in trace.values],
            )
        if finalize:
            cache.finalize()
        encode_s += time.perf_counter() - t0

        t0 = time.perf_counter()
        rp = cache.start_reconstruction()
        for i in range(L):
            khat, vhat = rp.layer(i)
            dk = khat.astype(np.float64) - trace.keys[i][sl].astype(np.float64)
            dv = vhat.astype(np.float64) - trace.values[i][sl].astype(np.float64)
            sse_k[i] += (dk**2).sum()
            sse_v[i] += (dv**2).sum()
            var_k[i] += centered_sq_sum(trace.keys[i][sl])
            var_v[i] += centered_sq_sum(trace.values[i][sl])
            max_err = max(max_err, np.abs(dk).max(initial=0.0), np.abs(dv).max(initial=0.0))
        decode_s += time.perf_counter() - t0
        rows_total += sl.stop - sl.start
        caches.append(cache)

    n_values = rows_total * C
    per_layer = []
    for i in range(L):
        per_layer.append(
            {
                "layer": i,
                "key_evr": 1.0 - sse_k[i] / max(var_k[i], 1e-300),
                "value_evr": 1.0 - sse_v[i] / max(var_v[i], 1e-300),
                "key_mse": sse_k[i] / n_values,
                "value_mse": sse_v[i] / n_values,
            }
        )
    pooled_evr = 1.0 - (sse_k.sum() + sse_v.sum()) / max(var_k.sum() + var_v.sum(), 1e-300)
    # the predictor set is shared by every sequence's cache: charge it once
    stored = sum(c.stored_bits(include_predictors=False) for c in caches)
    if caches:
        stored += caches[0].predictor_bits()
    eff_bits = stored / (2 * L * rows_total * C)

    total_values = 2 * L * rows_total * C
    results = {
        "per_layer": per_layer,
        "pooled": {
            "key_evr": 1.0 - sse_k.sum() / max(var_k.sum(), 1e-300),
            "value_evr": 1.0 - sse_v.sum() / max(var_v.sum(), 1e-300),
            "evr": pooled_evr,
            "mse": (sse_k.sum() + sse_v.sum()) / total_values,
            "max_abs_err": float(max_err),
        },
        "effective_bits": eff_bits,
        "stored_bits": int(stored),
        "n_tokens": rows_total,
        "predictors": config.predictors is not None,
    }
    report = EvalReport(
        kind="replay",
        config={
            "cache": config.to_dict(),
            "chunk_tokens": chunk_tokens,
            "finalize": finalize,
        },
        results=results,
        volatile={
            "generated_at": stamp(),
            "encode_values_per_s": total_values / encode_s if encode_s else None,
            "decode_values_per_s": total_values / decode_s if decode_s else None,
        },
    )
    if config.predictors is None:
        report.notes.append("no predictor set supplied; plain backbone baseline")
    if return_caches:
        return report, caches
    return report


def centered_sq_sum(a: np.ndarray) -> float:
    """Sum over channels of N * population variance, in float64."""
    a64 = a.astype(np.float64)
    centered = a64 - a64.mean(axis=0, keepdims=True)
    return float((centered**2).sum())


def footprint_spec_for(
    meta: TraceMeta, config: CacheConfig, amortize_sequences: int | None = None
) -> FootprintSpec:
    """Modeled footprint matching what replay would store for this trace."""
    params = 0
    if config.predictors is not None:
        params = config.predictors.param_count()
    return FootprintSpec(
        n_layers=meta.n_layers,
        n_tokens=meta.n_tokens,
        kv_channels=meta.kv_channels,
        sink_tokens=config.sink_tokens,
        buffer_tokens=0,
        first_layer_bits=None if config.first_layer_uncompressed else config.first_layer_bits,
        predictor_params=params,
        amortize_sequences=amortize_sequences or config.predictor_amortize_sequences,
    )
