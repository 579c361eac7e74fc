"""Backbone quantization operators and bit accounting.

Two interchangeable backbones:

* group-wise uniform min-max quantization (per-token by default), storing a
  float16 scale and float16 zero point per group;
* vector quantization of randomized-Hadamard-rotated groups against a
  Gaussian-optimized codebook, storing one float16 scale per group.

Both expose the same quantize/dequantize pair and produce a
:class:`QuantizedBlock`, the unit the cache stores and serializes.
Passing ``cfg=None`` selects the identity backbone: values pass through
losslessly and are accounted at the nominal 16 bits/value of an
uncompressed cache.

Group enumeration is slot-major: each row is cut into column chunks of
``group_size`` ("slots", the last one possibly short), and scales/codes are
laid out slot by slot, rows in order within a slot. Packed payloads are
bit-exact: rows * cols * code_bits bits, padded to a byte boundary only at
the very end of the block.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import ConfigError, FormatError
from .linalg import as_matrix

SCALE_BITS = 16  # scales and zero points are stored as float16

# Tail groups too short to carry even one codebook subvector fall back to a
# symmetric 4-bit scalar grid (codes 0..15 around mid-point 7.5), which needs
# only the group scale already present in the format.
_TAIL_BITS = 4
_TAIL_MID = (2**_TAIL_BITS - 1) / 2.0


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformConfig:
    """Group-wise min-max quantization config."""

    bits: int
    group_size: int = 64
    axis: str = "per_token"

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [1, 8], got {self.bits}")
        if self.group_size < 1:
            raise ConfigError("group_size must be positive")
        if self.axis not in ("per_token", "per_channel"):
            raise ConfigError(f"unknown axis {self.axis!r}")

    @property
    def code_bits(self) -> float:
        return float(self.bits)


@dataclass(frozen=True)
class VQConfig:
    """Rotated vector quantization config.

    ``d`` is the subvector dimension, ``n`` the codebook size, so the code
    rate is log2(n)/d bits per value. Supported grids are d=2 with
    n in {16, 64, 256} and d=4 with n=256.
    """

    d: int
    n: int
    group_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigError("group_size must be positive")
        if self.n < 2 or self.n & (self.n - 1):
            raise ConfigError(f"codebook size must be a power of two >= 2, got {self.n}")
        if (self.d, self.n) not in _SUPPORTED_GRIDS:
            raise ConfigError(
                f"unsupported grid (d={self.d}, n={self.n}); "
                f"supported: {sorted(_SUPPORTED_GRIDS)}"
            )
        if self.group_size % self.d:
            raise ConfigError("d must divide group_size")

    @property
    def code_bits(self) -> float:
        return math.log2(self.n) / self.d


_SUPPORTED_GRIDS = {(1, 2), (2, 16), (2, 64), (2, 256), (4, 256)}

# Code-rate presets: bits/value -> (d, n). The alternate 2-bit grid
# (d=4, n=256) is selected explicitly via VQConfig.
VQ_GRID_FOR_BITS = {2: (2, 16), 3: (2, 64), 4: (2, 256)}

BackboneConfig = Union[UniformConfig, VQConfig, None]


def vq_config_for_bits(bits: int, group_size: int = 1024, seed: int = 0) -> VQConfig:
    if bits not in VQ_GRID_FOR_BITS:
        raise ConfigError(f"no VQ grid preset for {bits} bits/value")
    d, n = VQ_GRID_FOR_BITS[bits]
    return VQConfig(d=d, n=n, group_size=group_size, seed=seed)


def backbone_at_bits(cfg: BackboneConfig, bits: int | None) -> BackboneConfig:
    """Same backbone family at a different code rate (e.g. first-layer 4-bit).

    ``bits=None`` means no rate override; an identity backbone stays identity.
    """
    if cfg is None or bits is None:
        return cfg
    if isinstance(cfg, UniformConfig):
        return replace(cfg, bits=bits)
    return vq_config_for_bits(bits, group_size=cfg.group_size, seed=cfg.seed)


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


def pack_codes(codes: np.ndarray, width: int) -> bytes:
    """Pack integer codes of ``width`` bits (1..8) LSB-first into bytes."""
    if not 1 <= width <= 8:
        raise ConfigError(f"code width must be in [1, 8], got {width}")
    return np.packbits(_code_bits(codes, width), bitorder="little").tobytes()


def unpack_codes(buf: bytes, width: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns ``count`` uint8 codes."""
    if not 1 <= width <= 8:
        raise ConfigError(f"code width must be in [1, 8], got {width}")
    need = count * width
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    if bits.size < need:
        raise FormatError(
            f"payload holds {bits.size} bits, need {need} for {count} codes"
        )
    return _bits_to_codes(bits[:need], width)


def _code_bits(codes: np.ndarray, width: int) -> np.ndarray:
    codes = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    return ((codes[:, None] >> np.arange(width, dtype=np.uint8)) & 1).ravel()


def _bits_to_codes(bits: np.ndarray, width: int) -> np.ndarray:
    weights = (1 << np.arange(width)).astype(np.uint16)
    vals = bits.reshape(-1, width).astype(np.uint16) @ weights
    return vals.astype(np.uint8)


# ---------------------------------------------------------------------------
# randomized Hadamard transform
# ---------------------------------------------------------------------------

_DIAG_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _sign_diagonal(seed: int, g: int) -> np.ndarray:
    key = (int(seed), int(g))
    diag = _DIAG_CACHE.get(key)
    if diag is None:
        rng = np.random.default_rng(np.random.PCG64(seed))
        diag = (rng.integers(0, 2, size=g, dtype=np.int8) * 2 - 1).astype(np.float32)
        _DIAG_CACHE[key] = diag
    return diag


def _fwht(rows: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform of each row (length power of 2)."""
    m, g = rows.shape
    out = rows
    h = 1
    while h < g:
        out = out.reshape(m, g // (2 * h), 2, h)
        a = out[:, :, 0, :]
        b = out[:, :, 1, :]
        out = np.stack((a + b, a - b), axis=2)
        h *= 2
    return out.reshape(m, g)


def _is_pow2(x: int) -> bool:
    return x > 0 and not x & (x - 1)


def _next_pow2(x: int) -> int:
    return 1 << max(0, (x - 1).bit_length())


def rht_forward(x, seed: int) -> np.ndarray:
    """Seeded sign flips followed by the orthonormal Hadamard rotation.

    ``x`` may be a single group (1-D) or a stack of groups (2-D, one per
    row); the group length must be a power of two. Norm-preserving.
    """
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    g = rows.shape[1]
    if not _is_pow2(g):
        raise ValueError(f"group length must be a power of two, got {g}")
    diag = _sign_diagonal(seed, g)
    out = _fwht(rows * diag) / np.float32(math.sqrt(g))
    return out[0] if single else out


def rht_inverse(y, seed: int) -> np.ndarray:
    """Exact adjoint of :func:`rht_forward`."""
    arr = np.asarray(y, dtype=np.float32)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    g = rows.shape[1]
    if not _is_pow2(g):
        raise ValueError(f"group length must be a power of two, got {g}")
    diag = _sign_diagonal(seed, g)
    out = (_fwht(rows) / np.float32(math.sqrt(g))) * diag
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Gaussian codebooks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Codebook:
    """Codewords optimized for unit-variance Gaussian subvectors.

    Closed under negation: for every codeword c, -c is also a codeword.
    """

    d: int
    n: int
    seed: int
    points: np.ndarray  # [n, d] float32
    _sq_norms: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(
            self, "_sq_norms", (self.points.astype(np.float64) ** 2).sum(axis=1)
        )

    def nearest(self, subvectors: np.ndarray) -> np.ndarray:
        """Index of the closest codeword per subvector; ties take the lowest index."""
        sub = np.ascontiguousarray(subvectors, dtype=np.float32)
        # argmin of ||s - c||^2 = argmin of ||c||^2 - 2 s.c; ||s||^2 is constant per row
        scores = self._sq_norms.astype(np.float32) - 2.0 * (sub @ self.points.T)
        return np.argmin(scores, axis=1).astype(np.uint8)


_CODEBOOK_CACHE: dict[tuple[int, int, int], Codebook] = {}


def build_gaussian_codebook(
    d: int,
    n: int,
    seed: int = 0,
    n_samples: int = 1 << 20,
    max_iters: int = 200,
    tol: float = 1e-5,
) -> Codebook:
    """Lloyd iterations on standard-normal samples, then exact symmetrization.

    Deterministic given (d, n, seed): the sample set, the initialization and
    the empty-cluster reseeding all come from one seeded generator. After
    convergence (max centroid movement < ``tol``) or ``max_iters`` rounds,
    centroids are greedily paired with their nearest negated partner and
    averaged so that negation closure holds exactly.
    """
    if d not in (1, 2, 4):
        raise ConfigError(f"subvector dimension must be 1, 2 or 4, got {d}")
    if n < 2 or n & (n - 1):
        raise ConfigError(f"codebook size must be a power of two >= 2, got {n}")
    if n_samples < n:
        raise ConfigError("need at least n samples")

    rng = np.random.default_rng(np.random.PCG64(seed))
    samples = rng.standard_normal((n_samples, d), dtype=np.float32)
    centroids = samples[rng.choice(n_samples, size=n, replace=False)].astype(np.float64)

    # chunk the distance matrix to ~32 MB and reuse the buffer across rounds
    chunk = min(n_samples, max(1 << 14, (32 << 20) // (4 * n)))
    scores = np.empty((chunk, n), dtype=np.float32)
    for _ in range(max_iters):
        sums = np.zeros((n, d), dtype=np.float64)
        counts = np.zeros(n, dtype=np.int64)
        c32 = centroids.astype(np.float32)
        c_sq = (centroids**2).sum(axis=1).astype(np.float32)
        for start in range(0, n_samples, chunk):
            block = samples[start : start + chunk]
            buf = scores[: block.shape[0]]
            np.matmul(block, c32.T, out=buf)
            buf *= -2.0
            buf += c_sq
            idx = np.argmin(buf, axis=1)
            counts += np.bincount(idx, minlength=n)
            for j in range(d):
                sums[:, j] += np.bincount(
                    idx, weights=block[:, j].astype(np.float64), minlength=n
                )
        new = centroids.copy()
        occupied = counts > 0
        new[occupied] = sums[occupied] / counts[occupied, None]
        for i in np.flatnonzero(~occupied):
            new[i] = samples[rng.integers(0, n_samples)]
        movement = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if movement < tol:
            break

    points = _symmetrize(centroids).astype(np.float32)
    return Codebook(d=d, n=n, seed=seed, points=points)


def _symmetrize(centroids: np.ndarray) -> np.ndarray:
    """Pair each centroid with its nearest negated partner and average.

    Produces a set exactly closed under negation (a centroid paired with
    itself collapses to the zero vector, which is its own negation).
    """
    n = centroids.shape[0]
    out = centroids.copy()
    # process large-norm centroids first so well-separated pairs lock in early
    order = np.argsort(-np.linalg.norm(centroids, axis=1), kind="stable")
    unpaired = set(range(n))
    for i in order:
        if i not in unpaired:
            continue
        rest = np.fromiter(unpaired, dtype=np.int64)
        dists = np.linalg.norm(centroids[rest] + centroids[i], axis=1)
        j = int(rest[np.argmin(dists)])
        v = (centroids[i] - centroids[j]) / 2.0
        out[i] = v
        out[j] = -v
        unpaired.discard(i)
        unpaired.discard(j)
    return out


_CODEBOOK_BUILD_VERSION = 1  # bump when the construction recipe changes


def _codebook_cache_path(d: int, n: int, seed: int):
    if os.environ.get("AQUAKV_NO_DISK_CACHE"):
        return None
    root = os.environ.get("AQUAKV_CACHE_DIR") or os.path.join(
        os.path.expanduser("~"), ".cache", "aquakv"
    )
    name = f"codebook-v{_CODEBOOK_BUILD_VERSION}-d{d}-n{n}-s{seed}.npy"
    return os.path.join(root, name)


def get_codebook(cfg: VQConfig) -> Codebook:
    """Codebook for a config, built once per (d, n, seed).

    Construction is deterministic, so results are memoized in-process and
    mirrored to ``~/.cache/aquakv`` (override with AQUAKV_CACHE_DIR, disable
    with AQUAKV_NO_DISK_CACHE); a cached load is bit-identical to a build.
    """
    key = (cfg.d, cfg.n, cfg.seed)
    cb = _CODEBOOK_CACHE.get(key)
    if cb is not None:
        return cb
    path = _codebook_cache_path(*key)
    if path and os.path.exists(path):
        points = np.load(path)
        if points.shape == (cfg.n, cfg.d):
            cb = Codebook(d=cfg.d, n=cfg.n, seed=cfg.seed, points=points)
    if cb is None:
        cb = build_gaussian_codebook(cfg.d, cfg.n, cfg.seed)
        if path:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tmp = f"{path}.{os.getpid()}.tmp.npy"
            np.save(tmp, cb.points)
            os.replace(tmp, path)
    _CODEBOOK_CACHE[key] = cb
    return cb


# ---------------------------------------------------------------------------
# quantized blocks
# ---------------------------------------------------------------------------

_SCHEME_IDS = {"uniform": 0, "vq": 1, "raw": 2}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_IDS.items()}
_HEADER = struct.Struct("<BBIIII")  # scheme, code bits, rows, cols, group size, n groups


@dataclass
class QuantizedBlock:
    """Packed codes plus per-group scaling for one [rows, cols] matrix."""

    scheme: str
    shape: tuple[int, int]
    payload: bytes
    scales: np.ndarray | None  # float16, slot-major
    zero_points: np.ndarray | None  # float16, uniform only
    config: BackboneConfig

    @property
    def n_groups(self) -> int:
        return 0 if self.scales is None else int(self.scales.size)

    def code_bit_length(self) -> int:
        """Exact number of code bits stored (before byte padding)."""
        if self.scheme == "raw":
            return 0
        rows, cols = self.shape
        if self.scheme == "uniform":
            return rows * cols * self.config.bits
        total = 0
        for _, _, g in _column_slots(cols, self.config.group_size):
            n_codes, width = _vq_slot_codes(g, self.config)
            total += rows * n_codes * width
        return total

    def stored_bits(self) -> int:
        """Bits this block accounts for: codes + scales (+ zero points).

        Raw blocks count at the nominal 16 bits/value of an uncompressed
        cache entry regardless of the in-memory float32 payload.
        """
        rows, cols = self.shape
        if self.scheme == "raw":
            return rows * cols * 16
        bits = self.code_bit_length() + SCALE_BITS * self.n_groups
        if self.zero_points is not None:
            bits += SCALE_BITS * int(self.zero_points.size)
        return bits

    def to_bytes(self) -> bytes:
        code_width = {
            "uniform": self.config.bits if self.scheme == "uniform" else 0,
            "vq": int(math.log2(self.config.n)) if self.scheme == "vq" else 0,
            "raw": 0,
        }[self.scheme]
        parts = [
            _HEADER.pack(
                _SCHEME_IDS[self.scheme],
                code_width,
                self.shape[0],
                self.shape[1],
                0 if self.config is None else self.config.group_size,
                self.n_groups,
            )
        ]
        if self.scales is not None:
            parts.append(self.scales.astype("<f2").tobytes())
        if self.zero_points is not None:
            parts.append(self.zero_points.astype("<f2").tobytes())
        parts.append(self.payload)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, config: BackboneConfig) -> tuple["QuantizedBlock", int]:
        """Parse one block from ``buf``; returns (block, bytes consumed)."""
        if len(buf) < _HEADER.size:
            raise FormatError("block header truncated")
        scheme_id, _, rows, cols, group_size, n_groups = _HEADER.unpack_from(buf)
        if scheme_id not in _SCHEME_NAMES:
            raise FormatError(f"unknown block scheme id {scheme_id}")
        scheme = _SCHEME_NAMES[scheme_id]
        if scheme != _scheme_for(config):
            raise FormatError(
                f"block scheme {scheme!r} does not match config {config!r}"
            )
        if config is not None and group_size != config.group_size:
            raise FormatError("block group size does not match config")
        off = _HEADER.size
        scales = zero_points = None
        if scheme != "raw":
            end = off + 2 * n_groups
            scales = np.frombuffer(buf[off:end], dtype="<f2").copy()
            off = end
            if scheme == "uniform":
                end = off + 2 * n_groups
                zero_points = np.frombuffer(buf[off:end], dtype="<f2").copy()
                off = end
        block = cls(scheme, (rows, cols), b"", scales, zero_points, config)
        if scheme == "raw":
            payload_len = rows * cols * 4
        else:
            payload_len = (block.code_bit_length() + 7) // 8
        end = off + payload_len
        if len(buf) < end:
            raise FormatError("block payload truncated")
        block.payload = bytes(buf[off:end])
        if scales is not None and scales.size != n_groups:
            raise FormatError("scale table truncated")
        return block, end


def _scheme_for(cfg: BackboneConfig) -> str:
    if cfg is None:
        return "raw"
    return "uniform" if isinstance(cfg, UniformConfig) else "vq"


def _column_slots(cols: int, group_size: int):
    """Yield (start, stop, length) column chunks of at most ``group_size``."""
    for start in range(0, cols, group_size):
        stop = min(start + group_size, cols)
        yield start, stop, stop - start


def _vq_slot_codes(g: int, cfg: VQConfig) -> tuple[int, int]:
    """(codes per group, code width) for a group of true length g."""
    g2 = _next_pow2(g)
    if g2 < cfg.d:
        return g, _TAIL_BITS  # scalar fallback for tiny tails
    return g2 // cfg.d, int(math.log2(cfg.n))


# ---------------------------------------------------------------------------
# uniform backbone
# ---------------------------------------------------------------------------


def uniform_quantize(X, cfg: UniformConfig) -> QuantizedBlock:
    """Group-wise min-max quantization to ``cfg.bits`` codes.

    Per group: scale = (max - min) / (2^bits - 1), zero point = min, both
    rounded to float16 before use so that encode and decode share the exact
    grid. A constant group gets scale 0 and reconstructs to its zero point.
    """
    X = as_matrix(X, "X")
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    work = X.T if cfg.axis == "per_channel" else X
    work = np.ascontiguousarray(work)
    rows, cols = work.shape
    max_code = (1 << cfg.bits) - 1

    scales = []
    zero_points = []
    bit_chunks = []
    for start, stop, _ in _column_slots(cols, cfg.group_size):
        chunk = work[:, start:stop]
        lo = chunk.min(axis=1)
        hi = chunk.max(axis=1)
        s16 = ((hi - lo) / max_code).astype(np.float16)
        z16 = lo.astype(np.float16)
        s32 = s16.astype(np.float32)
        z32 = z16.astype(np.float32)
        ok = (s32 > 0) & np.isfinite(s32)
        safe = np.where(ok, s32, 1.0)
        codes = np.clip(
            np.rint((chunk - z32[:, None]) / safe[:, None]), 0, max_code
        ).astype(np.uint8)
        codes[~ok] = 0
        scales.append(s16)
        zero_points.append(z16)
        bit_chunks.append(_code_bits(codes, cfg.bits))

    payload = np.packbits(np.concatenate(bit_chunks), bitorder="little").tobytes()
    return QuantizedBlock(
        scheme="uniform",
        shape=X.shape,
        payload=payload,
        scales=np.concatenate(scales),
        zero_points=np.concatenate(zero_points),
        config=cfg,
    )


def uniform_dequantize(qb: QuantizedBlock) -> np.ndarray:
    if qb.scheme != "uniform":
        raise FormatError(f"expected a uniform block, got {qb.scheme!r}")
    cfg: UniformConfig = qb.config
    rows, cols = qb.shape
    if cfg.axis == "per_channel":
        rows, cols = cols, rows
    out = np.empty((rows, cols), dtype=np.float32)

    bits = np.unpackbits(np.frombuffer(qb.payload, dtype=np.uint8), bitorder="little")
    expected = rows * cols * cfg.bits
    if bits.size < expected:
        raise FormatError("uniform payload shorter than rows*cols*bits")
    slot = 0
    offset = 0
    for start, stop, g in _column_slots(cols, cfg.group_size):
        n_codes = rows * g
        codes = _bits_to_codes(
            bits[offset : offset + n_codes * cfg.bits], cfg.bits
        ).reshape(rows, g)
        offset += n_codes * cfg.bits
        s32 = qb.scales[slot : slot + rows].astype(np.float32)
        z32 = qb.zero_points[slot : slot + rows].astype(np.float32)
        slot += rows
        out[:, start:stop] = codes.astype(np.float32) * s32[:, None] + z32[:, None]
    return out.T.copy() if cfg.axis == "per_channel" else out


# ---------------------------------------------------------------------------
# VQ backbone
# ---------------------------------------------------------------------------


def vq_quantize(X, cfg: VQConfig, codebook: Codebook | None = None) -> QuantizedBlock:
    """Rotate each per-token group, normalize by its RMS, round to codewords.

    The stored scale is ||rotated group||_2 / sqrt(group length) as float16;
    a zero scale short-circuits to an exactly-zero reconstruction. Groups
    whose length is not a power of two are zero-padded for the rotation only
    and truncated back on decode.
    """
    X = as_matrix(X, "X")
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    cb = codebook if codebook is not None else get_codebook(cfg)
    if (cb.d, cb.n) != (cfg.d, cfg.n):
        raise ConfigError("codebook geometry does not match config")
    rows, cols = X.shape

    scales = []
    bit_chunks = []
    for start, stop, g in _column_slots(cols, cfg.group_size):
        chunk = X[:, start:stop]
        n_codes, width = _vq_slot_codes(g, cfg)
        if _next_pow2(g) < cfg.d:  # tail too short for even one subvector
            s16 = (np.abs(chunk).max(axis=1) / _TAIL_MID).astype(np.float16)
            s32 = s16.astype(np.float32)
            ok = (s32 > 0) & np.isfinite(s32)
            safe = np.where(ok, s32, 1.0)
            codes = np.clip(
                np.rint(chunk / safe[:, None] + _TAIL_MID), 0, 2**_TAIL_BITS - 1
            ).astype(np.uint8)
            codes[~ok] = 0
        else:
            g2 = _next_pow2(g)
            padded = chunk
            if g2 != g:
                padded = np.zeros((rows, g2), dtype=np.float32)
                padded[:, :g] = chunk
            y = rht_forward(padded, cfg.seed)
            s16 = (
                np.sqrt((y.astype(np.float64) ** 2).sum(axis=1)) / math.sqrt(g2)
            ).astype(np.float16)
            s32 = s16.astype(np.float32)
            ok = (s32 > 0) & np.isfinite(s32)
            safe = np.where(ok, s32, 1.0)
            normalized = y / safe[:, None]
            codes = cb.nearest(normalized.reshape(rows * n_codes, cfg.d)).reshape(
                rows, n_codes
            )
            codes[~ok] = 0
        scales.append(s16)
        bit_chunks.append(_code_bits(codes, width))

    payload = np.packbits(np.concatenate(bit_chunks), bitorder="little").tobytes()
    return QuantizedBlock(
        scheme="vq",
        shape=X.shape,
        payload=payload,
        scales=np.concatenate(scales),
        zero_points=None,
        config=cfg,
    )


def vq_dequantize(qb: QuantizedBlock, codebook: Codebook | None = None) -> np.ndarray:
    if qb.scheme != "vq":
        raise FormatError(f"expected a vq block, got {qb.scheme!r}")
    cfg: VQConfig = qb.config
    cb = codebook if codebook is not None else get_codebook(cfg)
    rows, cols = qb.shape
    out = np.empty((rows, cols), dtype=np.float32)

    bits = np.unpackbits(np.frombuffer(qb.payload, dtype=np.uint8), bitorder="little")
    slot = 0
    offset = 0
    for start, stop, g in _column_slots(cols, cfg.group_size):
        n_codes, width = _vq_slot_codes(g, cfg)
        total = rows * n_codes * width
        if bits.size < offset + total:
            raise FormatError("vq payload shorter than its group structure")
        codes = _bits_to_codes(bits[offset : offset + total], width).reshape(
            rows, n_codes
        )
        offset += total
        s32 = qb.scales[slot : slot + rows].astype(np.float32)
        slot += rows
        if _next_pow2(g) < cfg.d:
            out[:, start:stop] = (codes.astype(np.float32) - _TAIL_MID) * s32[:, None]
        else:
            g2 = _next_pow2(g)
            vecs = cb.points[codes.ravel()].reshape(rows, g2)
            vecs *= s32[:, None]
            out[:, start:stop] = rht_inverse(vecs, cfg.seed)[:, :g]
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def quantize(X, cfg: BackboneConfig) -> QuantizedBlock:
    """Quantize with whichever backbone ``cfg`` selects (None = identity)."""
    if cfg is None:
        X = as_matrix(X, "X")
        return QuantizedBlock(
            scheme="raw",
            shape=X.shape,
            payload=X.astype("<f4").tobytes(),
            scales=None,
            zero_points=None,
            config=None,
        )
    if isinstance(cfg, UniformConfig):
        return uniform_quantize(X, cfg)
    return vq_quantize(X, cfg)


def dequantize(qb: QuantizedBlock) -> np.ndarray:
    if qb.scheme == "raw":
        rows, cols = qb.shape
        expected = rows * cols * 4
        if len(qb.payload) != expected:
            raise FormatError("raw payload length does not match its shape")
        return np.frombuffer(qb.payload, dtype="<f4").reshape(rows, cols).copy()
    if qb.scheme == "uniform":
        return uniform_dequantize(qb)
    return vq_dequantize(qb)


# ---------------------------------------------------------------------------
# footprint accounting
# ---------------------------------------------------------------------------


def nominal_code_bits(cfg: BackboneConfig) -> float:
    """Bits per stored value including per-group scale/zero-point overhead."""
    if cfg is None:
        return 16.0
    if isinstance(cfg, UniformConfig):
        return cfg.bits + 2 * SCALE_BITS / cfg.group_size
    return cfg.code_bits + SCALE_BITS / cfg.group_size


@dataclass(frozen=True)
class FootprintSpec:
    """Everything that occupies the cache besides plain backbone codes."""

    n_layers: int
    n_tokens: int
    kv_channels: int
    sink_tokens: int = 0
    buffer_tokens: int = 0
    first_layer_bits: int | None = None
    predictor_params: int = 0
    predictor_param_bits: int = 32
    amortize_sequences: int = 1
    uncompressed_bits: float = 16.0

    def __post_init__(self):
        if self.n_tokens <= 0:
            raise ConfigError("token count must be positive")
        if self.n_layers < 1 or self.kv_channels < 1:
            raise ConfigError("geometry dims must be >= 1")
        if self.sink_tokens + self.buffer_tokens > self.n_tokens:
            raise ConfigError("sink + buffer tokens exceed total tokens")
        if self.amortize_sequences < 1:
            raise ConfigError("amortize_sequences must be >= 1")


def effective_bits(cfg: BackboneConfig, spec: FootprintSpec) -> float:
    """Total stored bits divided by total cache values (2 * L * T * C)."""
    L, T, C = spec.n_layers, spec.n_tokens, spec.kv_channels
    per_token = 2 * C  # one key row and one value row
    compressed_tokens = T - spec.sink_tokens - spec.buffer_tokens
    plain = nominal_code_bits(cfg)
    first = plain
    if spec.first_layer_bits is not None and cfg is not None:
        first = nominal_code_bits(backbone_at_bits(cfg, spec.first_layer_bits))

    total = 0.0
    total += L * spec.sink_tokens * per_token * spec.uncompressed_bits
    total += L * spec.buffer_tokens * per_token * spec.uncompressed_bits
    total += compressed_tokens * per_token * first
    total += (L - 1) * compressed_tokens * per_token * plain
    total += spec.predictor_params * spec.predictor_param_bits / spec.amortize_sequences
    return total / (L * T * per_token)


def cache_gigabytes(
    n_layers: int, kv_channels: int, n_tokens: int, bits_per_value: float
) -> float:
    """Footprint in decimal gigabytes of a full cache at the given rate."""
    if n_tokens <= 0:
        raise ConfigError("token count must be positive")
    values = 2 * n_layers * n_tokens * kv_channels
    return values * bits_per_value / 8 / 1e9


def predictor_param_count(n_layers: int, kv_channels: int) -> int:
    """Parameters in a full predictor set: key map C->C plus value map 2C->C."""
    c = kv_channels
    per_layer = (c * c + c) + (2 * c * c + c)
    return (n_layers - 1) * per_layer
