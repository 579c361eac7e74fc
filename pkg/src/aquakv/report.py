"""Evaluation report container with deterministic JSON emission.

Anything nondeterministic (timestamps, wall-clock throughput) lives in the
``volatile`` field so that two runs of the same configuration produce
byte-identical reports once that one field is dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

SCHEMA_VERSION = 1


def _plain(obj):
    """Recursively strip numpy types so the result is json-serializable."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


@dataclass
class EvalReport:
    kind: str
    config: dict
    results: dict
    notes: list[str] = field(default_factory=list)
    volatile: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self, include_volatile: bool = True) -> dict:
        d = {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "config": _plain(self.config),
            "results": _plain(self.results),
            "notes": list(self.notes),
        }
        if include_volatile:
            d["volatile"] = _plain(self.volatile)
        return d

    def to_json(self, include_volatile: bool = True) -> str:
        return json.dumps(
            self.to_dict(include_volatile), indent=2, sort_keys=True, allow_nan=False
        )

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")


def stamp() -> str:
    return datetime.now(timezone.utc).isoformat()
