"""Heavy-hitter token selection and its composition with compression.

Selection follows the accumulated-attention-score recipe: always keep the
newest ceil(recent_fraction * T) tokens plus the highest-scoring remaining
ones until ceil(budget_fraction * T) tokens total, with sink tokens always
kept and counted inside the budget. Scores come from the trace; this module
never computes attention itself.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import ConfigError, GeometryError
from .kvcache import CacheConfig, replay_trace
from .report import EvalReport
from .trace_io import KVTrace


@dataclass(frozen=True)
class PruneConfig:
    budget_fraction: float = 0.2
    recent_fraction: float | None = None  # default: half the budget
    shared: bool = True

    def __post_init__(self):
        if not 0 < self.budget_fraction <= 1:
            raise ConfigError("budget_fraction must be in (0, 1]")
        rf = self.resolved_recent()
        if rf < 0 or rf > self.budget_fraction:
            raise ConfigError("recent_fraction must be in [0, budget_fraction]")

    def resolved_recent(self) -> float:
        return (
            0.5 * self.budget_fraction
            if self.recent_fraction is None
            else self.recent_fraction
        )


def _select_one(scores: np.ndarray, budget_fraction, recent_fraction, sink_tokens) -> np.ndarray:
    t = scores.shape[0]
    keep_total = math.ceil(budget_fraction * t)
    n_recent = math.ceil(recent_fraction * t)
    always = np.zeros(t, dtype=bool)
    always[: min(sink_tokens, t)] = True
    always[t - n_recent :] = n_recent > 0
    if keep_total < int(always.sum()):
        raise ConfigError(
            f"budget of {keep_total} tokens cannot cover "
            f"{int(always.sum())} sink + recent tokens"
        )
    remaining = keep_total - int(always.sum())
    kept = np.flatnonzero(always).tolist()
    if remaining > 0:
        candidates = np.flatnonzero(~always)
        # stable sort on negated scores: ties resolve to the lower index
        order = candidates[np.argsort(-scores[candidates], kind="stable")]
        kept.extend(order[:remaining].tolist())
    return np.array(sorted(kept), dtype=np.int64)


def h2o_select(
    stats: np.ndarray,
    budget_fraction: float,
    recent_fraction: float,
    sink_tokens: int = 0,
    shared: bool = False,
) -> list[np.ndarray]:
    """Kept token indices per layer (sorted ascending).

    ``stats`` is [n_layers, n_tokens] of accumulated attention scores.
    ``shared=True`` sums scores over layers and returns the same kept set
    for every layer, which keeps cross-layer token alignment intact.
    """
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim != 2:
        raise GeometryError("stats must be [n_layers, n_tokens]")
    if (stats < 0).any():
        raise ConfigError("attention scores must be non-negative")
    if not 0 < budget_fraction <= 1:
        raise ConfigError("budget_fraction must be in (0, 1]")
    if recent_fraction < 0 or recent_fraction > budget_fraction:
        raise ConfigError("recent_fraction must be in [0, budget_fraction]")
    if shared:
        kept = _select_one(stats.sum(axis=0), budget_fraction, recent_fraction, sink_tokens)
        return [kept.copy() for _ in range(stats.shape[0])]
    return [
        _select_one(stats[i], budget_fraction, recent_fraction, sink_tokens)
        for i in range(stats.shape[0])
    ]


def prune_then_compress(
    trace: KVTrace,
    prune_cfg: PruneConfig,
    cache_cfg: CacheConfig,
    chunk_tokens: int = 128,
) -> EvalReport:
    """Select heavy hitters per sequence, then replay only the kept tokens.

    Replay needs the same token set at every layer (layer i decodes against
    layer i-1 reconstructions of the same positions), so the kept set is
    always the shared one here; per-layer sets remain available through
    :func:`h2o_select` directly.
    """
    if trace.attention_stats is None:
        raise ConfigError("trace carries no attention stats to prune with")
    rf = prune_cfg.resolved_recent()

    kept_per_seq = []
    kept_total = 0
    for sl in trace.meta.sequence_slices():
        kept = h2o_select(
            trace.attention_stats[:, sl],
            prune_cfg.budget_fraction,
            rf,
            sink_tokens=cache_cfg.sink_tokens,
            shared=True,
        )[0]
        kept_per_seq.append(kept)
        kept_total += kept.size

    pruned = trace.subset_tokens(kept_per_seq)
    report = replay_trace(pruned, cache_cfg, chunk_tokens=chunk_tokens)

    original_values = 2 * trace.meta.n_layers * trace.meta.n_tokens * trace.meta.kv_channels
    stored = report.results["stored_bits"]
    report.kind = "prune_replay"
    report.config["prune"] = {
        "budget_fraction": prune_cfg.budget_fraction,
        "recent_fraction": rf,
        "shared": True,
    }
    report.results["pruning"] = {
        "kept_tokens": int(kept_total),
        "total_tokens": trace.meta.n_tokens,
        "kept_fraction": kept_total / trace.meta.n_tokens,
        "combined_bits_per_original_value": stored / original_values,
    }
    return report
