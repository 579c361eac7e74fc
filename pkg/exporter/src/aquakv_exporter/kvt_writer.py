"""Standalone KVT1 writer.

Deliberately shares no code with the compression engine: the format is
simple enough (JSON header + raw little-endian payloads + blake2b-64
trailer) that an independent implementation doubles as a check that the
documented layout is complete.

    magic    b"KVT1"
    version  u16 = 1
    hdr_len  u32
    header   JSON (layers, kv heads, head dim, sequence lengths, rope mode,
             rope theta, attention-stats flag, source string)
    payload  per layer: K then V, row-major float32 [n_tokens, kv_channels]
    stats    optional per-layer float32 [n_tokens]
    trailer  u64 blake2b-8 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"KVT1"
VERSION = 1


class KVTWriter:
    def __init__(
        self,
        path,
        n_layers: int,
        n_kv_heads: int,
        head_dim: int,
        sequence_lengths: list[int],
        rope_mode: str = "pre_rope",
        rope_theta: float = 10000.0,
        with_stats: bool = False,
        source: str = "",
    ):
        self.path = path
        self.n_layers = n_layers
        self.kv_channels = n_kv_heads * head_dim
        self.n_tokens = sum(sequence_lengths)
        self.with_stats = with_stats
        self._header = {
            "n_layers": n_layers,
            "n_kv_heads": n_kv_heads,
            "head_dim": head_dim,
            "sequence_lengths": list(sequence_lengths),
            "rope_mode": rope_mode,
            "rope_theta": rope_theta,
            "has_attention_stats": with_stats,
            "source": source,
        }

    def _expect(self, arr: np.ndarray, shape, what: str) -> np.ndarray:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.shape != shape:
            raise ValueError(f"{what} has shape {arr.shape}, expected {shape}")
        if not np.isfinite(arr).all():
            raise ValueError(f"{what} contains non-finite values")
        return arr

    def write(self, keys, values, attention_stats=None) -> None:
        """Write the whole trace: per-layer [n_tokens, kv_channels] arrays."""
        if len(keys) != self.n_layers or len(values) != self.n_layers:
            raise ValueError("layer count mismatch")
        if self.with_stats and attention_stats is None:
            raise ValueError("attention stats promised but not provided")

        digest = hashlib.blake2b(digest_size=8)
        header = json.dumps(self._header, sort_keys=True).encode("utf-8")
        shape = (self.n_tokens, self.kv_channels)
        with open(self.path, "wb") as f:

            def emit(data: bytes):
                f.write(data)
                digest.update(data)

            emit(MAGIC)
            emit(struct.pack("<H", VERSION))
            emit(struct.pack("<I", len(header)))
            emit(header)
            for layer in range(self.n_layers):
                emit(self._expect(keys[layer], shape, f"layer {layer} keys").tobytes())
                emit(self._expect(values[layer], shape, f"layer {layer} values").tobytes())
            if self.with_stats:
                stats = np.ascontiguousarray(attention_stats, dtype="<f4")
                if stats.shape != (self.n_layers, self.n_tokens):
                    raise ValueError(
                        f"attention stats have shape {stats.shape}, "
                        f"expected {(self.n_layers, self.n_tokens)}"
                    )
                emit(stats.tobytes())
            f.write(digest.digest())
