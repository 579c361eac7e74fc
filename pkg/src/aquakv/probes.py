"""Linear dependency probes over a KV trace.

For each (target role, input source, layer) triple, fit a ridge probe on
ground-truth inputs from the training sequences and report its explained
variance on the holdout sequences. Unlike calibration - which trains on
*reconstructed* inputs because that is what inference will see - probes
deliberately use ground truth: they measure how much mutual information
exists, so probe numbers upper-bound what a deployed predictor achieves.

Sources are causally valid only: earlier layers, earlier tokens, or the
other role at the same position. Multi-source probes concatenate their
inputs in declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibConfig, split_sequences
from .errors import ConfigError
from .linalg import explained_variance_ratio, ridge_fit
from .report import EvalReport, stamp
from .trace_io import KVTrace

# Quantizer-equivalence reference lines overlaid in reports: typical
# explained variance of 1-bit and 2-bit quantizers on these tensors.
QUANTIZER_REFERENCE_EVR = {"1bit": 0.75, "2bit": 0.89}


@dataclass(frozen=True)
class ProbeSource:
    kind: str  # "prev_layer" | "prev_token" | "cross_role" | "self"
    k: int = 0

    def __post_init__(self):
        if self.kind in ("prev_layer", "prev_token") and self.k < 1:
            raise ConfigError(f"{self.kind} needs a positive offset")
        if self.kind not in ("prev_layer", "prev_token", "cross_role", "self"):
            raise ConfigError(f"unknown probe source kind {self.kind!r}")

    def label(self) -> str:
        return {
            "prev_layer": f"prevL{self.k}",
            "prev_token": f"prevT{self.k}",
            "cross_role": "crossrole",
            "self": "self",
        }[self.kind]


def parse_source(spec: str) -> tuple[ProbeSource, ...]:
    """Parse one probe spec, e.g. "prevL1", "prevT2", "prevL1+crossrole"."""
    atoms = []
    for atom in spec.split("+"):
        atom = atom.strip()
        if atom.startswith("prevL"):
            atoms.append(ProbeSource("prev_layer", int(atom[5:])))
        elif atom.startswith("prevT"):
            atoms.append(ProbeSource("prev_token", int(atom[5:])))
        elif atom == "crossrole":
            atoms.append(ProbeSource("cross_role"))
        elif atom == "self":
            atoms.append(ProbeSource("self"))
        else:
            raise ConfigError(f"cannot parse probe source {atom!r}")
    if not atoms:
        raise ConfigError("empty probe source")
    return tuple(atoms)


def source_label(atoms: tuple[ProbeSource, ...]) -> str:
    return "+".join(a.label() for a in atoms)


def _valid_rows(atoms, lengths: list[int]) -> np.ndarray:
    """Mask of rows usable by this probe: drops the first k tokens per
    sequence for prev_token(k) atoms."""
    drop = max((a.k for a in atoms if a.kind == "prev_token"), default=0)
    mask = np.ones(sum(lengths), dtype=bool)
    start = 0
    for n in lengths:
        mask[start : start + min(drop, n)] = False
        start += n
    return mask


def _shift_rows(arr: np.ndarray, lengths: list[int], k: int) -> np.ndarray:
    """Row t receives row t-k of its own sequence (first k rows are junk and
    must be masked out by the caller)."""
    out = np.empty_like(arr)
    start = 0
    for n in lengths:
        out[start + k : start + n] = arr[start : start + n - k]
        out[start : start + min(k, n)] = 0.0
        start += n
    return out


def _source_matrix(trace, atoms, target: str, layer: int, lengths) -> np.ndarray | None:
    parts = []
    for atom in atoms:
        role_keys = target == "keys"
        if atom.kind == "prev_layer":
            if layer - atom.k < 0:
                return None
            src = trace.keys[layer - atom.k] if role_keys else trace.values[layer - atom.k]
        elif atom.kind == "prev_token":
            base = trace.keys[layer] if role_keys else trace.values[layer]
            src = _shift_rows(base, lengths, atom.k)
        elif atom.kind == "cross_role":
            src = trace.values[layer] if role_keys else trace.keys[layer]
        else:  # self
            src = trace.keys[layer] if role_keys else trace.values[layer]
        parts.append(src)
    return parts[0] if len(parts) == 1 else np.hstack(parts)


def probe_matrix(
    trace: KVTrace,
    sources: list[str] | list[tuple[ProbeSource, ...]],
    targets: tuple[str, ...] = ("keys", "values"),
    lam: float = 1e-3,
    holdout_sequences: int | None = None,
) -> EvalReport:
    """Fit every (target, source, layer) probe and report holdout EVR.

    Results carry both the per-layer explained variance and the
    layer-averaged mean per source; sources that reach before layer 0 are
    skipped with a note.
    """
    parsed = [parse_source(s) if isinstance(s, str) else tuple(s) for s in sources]
    cfg = CalibConfig(backbone=None, holdout_sequences=holdout_sequences, lam=lam)
    train_ids, holdout_ids = split_sequences(trace.meta, cfg)
    if not holdout_ids:
        raise ConfigError("probe needs at least one holdout sequence")
    train = trace.subset_sequences(train_ids)
    holdout = trace.subset_sequences(holdout_ids)

    per_layer: dict[str, dict[str, dict[str, float]]] = {t: {} for t in targets}
    notes = []
    for target in targets:
        for atoms in parsed:
            label = source_label(atoms)
            layer_evr: dict[str, float] = {}
            t_mask = _valid_rows(atoms, train.meta.sequence_lengths)
            h_mask = _valid_rows(atoms, holdout.meta.sequence_lengths)
            for layer in range(trace.meta.n_layers):
                x_train = _source_matrix(train, atoms, target, layer, train.meta.sequence_lengths)
                if x_train is None:
                    notes.append(f"{target}/{label}: layer {layer} skipped (no source layer)")
                    continue
                y_train = (train.keys if target == "keys" else train.values)[layer]
                probe = ridge_fit(x_train[t_mask], y_train[t_mask], lam)
                x_hold = _source_matrix(holdout, atoms, target, layer, holdout.meta.sequence_lengths)
                y_hold = (holdout.keys if target == "keys" else holdout.values)[layer]
                y_pred = probe.apply(x_hold[h_mask])
                layer_evr[str(layer)] = explained_variance_ratio(y_hold[h_mask], y_pred)
            per_layer[target][label] = layer_evr

    means = {
        target: {
            label: float(np.mean(list(vals.values()))) if vals else None
            for label, vals in by_source.items()
        }
        for target, by_source in per_layer.items()
    }
    return EvalReport(
        kind="probe",
        config={
            "sources": [source_label(a) for a in parsed],
            "targets": list(targets),
            "lambda": lam,
            "train_sequences": len(train_ids),
            "holdout_sequences": len(holdout_ids),
        },
        results={
            "per_layer": per_layer,
            "mean": means,
            "quantizer_reference_evr": QUANTIZER_REFERENCE_EVR,
        },
        notes=notes,
        volatile={"generated_at": stamp()},
    )


def probe_csv(report: EvalReport) -> str:
    """Flatten a probe report into plot-ready CSV."""
    lines = ["target,source,layer,evr"]
    for target, by_source in report.results["per_layer"].items():
        for label, layer_evr in by_source.items():
            for layer, evr in sorted(layer_evr.items(), key=lambda kv: int(kv[0])):
                lines.append(f"{target},{label},{layer},{evr:.6f}")
    return "\n".join(lines) + "\n"
