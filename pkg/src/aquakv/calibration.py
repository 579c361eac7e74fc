"""Sequential predictor calibration with reconstructed inputs.

Layers are processed strictly in order. Layer 0 is reconstructed by plain
backbone quantization at the first-layer rate; every later layer fits its
key predictor on the *reconstructed* previous-layer keys (not ground truth),
quantizes the key residual, fits the value predictor on the reconstructed
[previous values ; current keys], and carries the resulting reconstructions
forward. Targets are always ground truth: layer inputs are never perturbed
by quantization during calibration, only predictor inputs use
reconstructions.

Attention-sink rows (the first ``sink_tokens`` of each sequence) never
enter the regression - they are scale outliers - but their exact values are
kept in the carried reconstructions, matching how the cache stores them.

The pass streams one layer at a time: peak working set is the previous
layer's reconstructions plus the current layer's tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError
from .kvcache import CacheConfig, backbone_to_dict, decode_block, encode_block
from .linalg import explained_variance_ratio, ridge_fit
from .predictor import LinearPredictor, PredictorSet
from .quantizer import BackboneConfig, dequantize, quantize
from .report import EvalReport, stamp
from .trace_io import KVTrace, TraceMeta, TraceReader, apply_rope, sequence_positions


@dataclass(frozen=True)
class CalibConfig:
    backbone: BackboneConfig
    lam: float = 1e-3
    sink_tokens: int = 4
    first_layer_bits: int | None = 4
    first_layer_uncompressed: bool = False
    rope_mode: str = "pre_rope"
    train_sequences: int | None = None
    holdout_sequences: int | None = None
    subsample_rows: int = 1 << 22
    seed: int = 0

    def __post_init__(self):
        if self.sink_tokens < 0:
            raise ConfigError("sink_tokens must be >= 0")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.rope_mode not in ("pre_rope", "post_rope"):
            raise ConfigError(f"unknown rope mode {self.rope_mode!r}")

    def cache_config(self, predictors=None) -> CacheConfig:
        return CacheConfig(
            backbone=self.backbone,
            sink_tokens=self.sink_tokens,
            recent_buffer=128,
            first_layer_bits=self.first_layer_bits,
            first_layer_uncompressed=self.first_layer_uncompressed,
            predictors=predictors,
        )


def split_sequences(meta: TraceMeta, cfg: CalibConfig) -> tuple[list[int], list[int]]:
    """Leading sequences train, trailing ones are held out (disjoint)."""
    n = meta.n_sequences
    holdout = cfg.holdout_sequences
    if holdout is None:
        holdout = max(1, n // 8) if n >= 2 else 0
    train = cfg.train_sequences if cfg.train_sequences is not None else n - holdout
    if train < 1:
        raise ConfigError("no training sequences left after the holdout split")
    if train + holdout > n:
        raise ConfigError(
            f"split needs {train}+{holdout} sequences, trace has {n}"
        )
    return list(range(train)), list(range(train, train + holdout))


def _sink_mask(lengths: list[int], sink_tokens: int) -> np.ndarray:
    mask = np.zeros(sum(lengths), dtype=bool)
    start = 0
    for n in lengths:
        mask[start : start + min(sink_tokens, n)] = True
        start += n
    return mask


class _LayerSource:
    """Uniform layer access over anything exposing ``.meta`` and ``.layer(i)``
    (an in-memory :class:`KVTrace`, a streaming :class:`TraceReader`, ...)."""

    def __init__(self, trace, rope_mode: str):
        getter = getattr(trace, "layer", None)
        if getattr(trace, "meta", None) is None or not callable(getter):
            raise TypeError(f"cannot calibrate from {type(trace).__name__}")
        self.meta = trace.meta
        self._get = getter
        self._rotate = False
        if rope_mode != self.meta.rope_mode:
            if rope_mode == "post_rope" and self.meta.rope_mode == "pre_rope":
                # ablation path: rotate stored keys forward on the fly
                self._rotate = True
                self._positions = sequence_positions(self.meta)
            else:
                raise ConfigError(
                    f"config wants {rope_mode} keys but trace stores "
                    f"{self.meta.rope_mode}"
                )

    def layer(self, i: int, rows: np.ndarray | None = None):
        k, v = self._get(i)
        if self._rotate:
            k = apply_rope(k, self._positions, self.meta.head_dim, self.meta.rope_theta)
        if rows is not None:
            k, v = k[rows], v[rows]
        return k, v


def calibrate(trace, cfg: CalibConfig, keep_reconstructions: bool = False):
    """Train the full predictor set on the training split of ``trace``.

    Returns the :class:`PredictorSet`; with ``keep_reconstructions=True``
    returns ``(predictor_set, reconstructions)`` where reconstructions is a
    dict of per-layer K-hat / V-hat arrays over the training rows, for
    consistency checks against cache replay.
    """
    src = _LayerSource(trace, cfg.rope_mode)
    meta = src.meta
    if meta.n_layers < 2:
        raise GeometryError("calibration needs at least 2 layers")

    train_ids, _ = split_sequences(meta, cfg)
    slices = meta.sequence_slices()
    rows = np.concatenate([np.arange(slices[s].start, slices[s].stop) for s in train_ids])
    lengths = [meta.sequence_lengths[s] for s in train_ids]
    sinks = _sink_mask(lengths, cfg.sink_tokens)
    ns = ~sinks  # rows that get quantized and enter the fit

    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    fit_rows = np.flatnonzero(ns)
    if fit_rows.size > cfg.subsample_rows:
        fit_rows = np.sort(
            rng.choice(fit_rows, size=cfg.subsample_rows, replace=False)
        )

    cache_cfg = cfg.cache_config()  # predictor-free: used for the layer-0 path
    pairs: list[tuple[LinearPredictor, LinearPredictor]] = []
    recons = {"keys": [], "values": []} if keep_reconstructions else None

    k_truth, v_truth = src.layer(0, rows)
    khat = k_truth.copy()
    vhat = v_truth.copy()
    k_q, v_q = encode_block(0, k_truth[ns], v_truth[ns], None, None, cache_cfg)
    khat[ns], vhat[ns] = decode_block(0, k_q, v_q, None, None, cache_cfg)
    if keep_reconstructions:
        recons["keys"].append(khat.copy())
        recons["values"].append(vhat.copy())

    for layer in range(1, meta.n_layers):
        k_truth, v_truth = src.layer(layer, rows)

        f_key = LinearPredictor(
            "key", ridge_fit(khat[fit_rows], k_truth[fit_rows], cfg.lam)
        )

        # the value fit needs this layer's key reconstructions, so keys go first
        k_pred = f_key.map.apply(khat[ns])
        k_resid_hat = dequantize(quantize(k_truth[ns] - k_pred, cfg.backbone))
        new_khat = k_truth.copy()
        new_khat[ns] = k_pred + k_resid_hat

        v_in = np.hstack([vhat, new_khat])
        f_value = LinearPredictor(
            "value", ridge_fit(v_in[fit_rows], v_truth[fit_rows], cfg.lam)
        )
        v_pred = f_value.map.apply(v_in[ns])
        v_resid_hat = dequantize(quantize(v_truth[ns] - v_pred, cfg.backbone))
        new_vhat = v_truth.copy()
        new_vhat[ns] = v_pred + v_resid_hat

        pairs.append((f_key, f_value))
        khat, vhat = new_khat, new_vhat
        if keep_reconstructions:
            recons["keys"].append(khat.copy())
            recons["values"].append(vhat.copy())

    metadata = {
        "lambda": cfg.lam,
        "seed": cfg.seed,
        "sink_tokens": cfg.sink_tokens,
        "rope_mode": cfg.rope_mode,
        "first_layer_bits": cfg.first_layer_bits,
        "backbone": backbone_to_dict(cfg.backbone),
        "train_sequences": len(train_ids),
        "train_tokens": int(rows.size),
    }
    ps = PredictorSet(
        n_layers=meta.n_layers,
        n_kv_heads=meta.n_kv_heads,
        head_dim=meta.head_dim,
        pairs=pairs,
        metadata=metadata,
    )
    if keep_reconstructions:
        return ps, recons
    return ps


def holdout_report(ps: PredictorSet, trace, cfg: CalibConfig, holdout: bool = True) -> EvalReport:
    """Roll predictors over held-out sequences and score each layer.

    Per layer, reports the predictor's explained variance, the explained
    variance of the full reconstruction (prediction plus quantized
    residual), the residual-quantization quality, and a zero-predictor
    baseline (quantizing the raw tensors at the same backbone rate).
    Sink rows are excluded from every metric, mirroring calibration.
    """
    src = _LayerSource(trace, cfg.rope_mode)
    meta = src.meta
    ps.check_compatible(meta.geometry)

    train_ids, holdout_ids = split_sequences(meta, cfg)
    ids = holdout_ids if holdout else train_ids
    if not ids:
        raise ConfigError("no sequences in the requested split")
    slices = meta.sequence_slices()
    rows = np.concatenate([np.arange(slices[s].start, slices[s].stop) for s in ids])
    lengths = [meta.sequence_lengths[s] for s in ids]
    ns = ~_sink_mask(lengths, cfg.sink_tokens)

    cache_cfg = cfg.cache_config()
    per_layer = []

    k_truth, v_truth = src.layer(0, rows)
    khat, vhat = k_truth.copy(), v_truth.copy()
    k_q, v_q = encode_block(0, k_truth[ns], v_truth[ns], None, None, cache_cfg)
    khat[ns], vhat[ns] = decode_block(0, k_q, v_q, None, None, cache_cfg)
    per_layer.append(
        {
            "layer": 0,
            "key_recon_evr": explained_variance_ratio(k_truth[ns], khat[ns]),
            "value_recon_evr": explained_variance_ratio(v_truth[ns], vhat[ns]),
        }
    )

    for layer in range(1, meta.n_layers):
        k_truth, v_truth = src.layer(layer, rows)
        f_key = ps.key_predictor(layer)
        f_value = ps.value_predictor(layer)

        k_pred = f_key.map.apply(khat[ns])
        k_resid = k_truth[ns] - k_pred
        k_resid_hat = dequantize(quantize(k_resid, cfg.backbone))
        new_khat = k_truth.copy()
        new_khat[ns] = k_pred + k_resid_hat

        v_in = np.hstack([vhat, new_khat])
        v_pred = f_value.map.apply(v_in[ns])
        v_resid = v_truth[ns] - v_pred
        v_resid_hat = dequantize(quantize(v_resid, cfg.backbone))
        new_vhat = v_truth.copy()
        new_vhat[ns] = v_pred + v_resid_hat

        k_base = dequantize(quantize(k_truth[ns], cfg.backbone))
        v_base = dequantize(quantize(v_truth[ns], cfg.backbone))

        per_layer.append(
            {
                "layer": layer,
                "key_predictor_evr": explained_variance_ratio(k_truth[ns], k_pred),
                "value_predictor_evr": explained_variance_ratio(v_truth[ns], v_pred),
                "key_recon_evr": explained_variance_ratio(k_truth[ns], new_khat[ns]),
                "value_recon_evr": explained_variance_ratio(v_truth[ns], new_vhat[ns]),
                "key_residual_quant_evr": explained_variance_ratio(k_resid, k_resid_hat),
                "value_residual_quant_evr": explained_variance_ratio(v_resid, v_resid_hat),
                "key_zero_predictor_evr": explained_variance_ratio(k_truth[ns], k_base),
                "value_zero_predictor_evr": explained_variance_ratio(v_truth[ns], v_base),
            }
        )
        khat, vhat = new_khat, new_vhat

    predictor_layers = per_layer[1:]
    means = {
        key: float(np.mean([row[key] for row in predictor_layers]))
        for key in predictor_layers[0]
        if key != "layer"
    }
    return EvalReport(
        kind="holdout",
        config={
            "backbone": backbone_to_dict(cfg.backbone),
            "lambda": cfg.lam,
            "sink_tokens": cfg.sink_tokens,
            "first_layer_bits": cfg.first_layer_bits,
            "rope_mode": cfg.rope_mode,
            "split": "holdout" if holdout else "train",
            "sequences": len(ids),
        },
        results={"per_layer": per_layer, "mean": means},
        notes=[
            "zero-predictor rows quantize the raw tensors at the same backbone rate",
        ],
        volatile={"generated_at": stamp()},
    )
