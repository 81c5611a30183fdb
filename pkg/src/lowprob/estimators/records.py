"""Budgets and estimate records shared by all estimators."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

from ..errors import ConfigError, InputError

METHODS = ("itgis", "mhis", "qld", "gld", "naive")


@dataclass(frozen=True)
class EstimatorBudget:
    """Model-call budget and its method-specific shape.

    One model call is one input sequence evaluated by the network. Methods that
    also need the input gradient (ITGIS, MHIS) get the backward pass with the
    forward it reuses, so a gradient step is still one call.
    """

    total_model_calls: int
    n_batches: int = 0
    batch_size: int = 0
    n_chains: int = 0
    n_burn: int = 0
    n_kept: int = 0
    n_samples: int = 0

    @classmethod
    def for_method(cls, method: str, total: int) -> "EstimatorBudget":
        """Default shape for ``total`` calls, keeping the large-budget ratios.

        ITGIS: square grid of batches; MHIS: up to 32 chains, one third of each
        walk discarded as burn-in; QLD/GLD/naive: ``total`` samples.
        """
        total = int(total)
        if total < 4:
            raise ConfigError("budget must be at least 4 model calls")
        if method in ("itgis", "naive"):
            n_batches = 2 ** (int(math.log2(total)) // 2)
            return cls(total, n_batches=n_batches, batch_size=total // n_batches)
        if method == "mhis":
            n_chains = min(32, max(1, total // 32))
            steps = total // n_chains - 1
            n_burn = steps // 3
            return cls(total, n_chains=n_chains, n_burn=n_burn, n_kept=steps - n_burn)
        if method in ("qld", "gld"):
            return cls(total, n_samples=total)
        raise ConfigError(f"unknown method {method!r}")

    @classmethod
    def mhis_shape(cls, n_chains: int, n_burn: int, n_kept: int) -> "EstimatorBudget":
        return cls(n_chains * (1 + n_burn + n_kept), n_chains=n_chains, n_burn=n_burn, n_kept=n_kept)

    @classmethod
    def itgis_shape(cls, n_batches: int, batch_size: int) -> "EstimatorBudget":
        return cls(n_batches * batch_size, n_batches=n_batches, batch_size=batch_size)

    def planned_calls(self, method: str) -> int:
        if method in ("itgis", "naive"):
            return self.n_batches * self.batch_size
        if method == "mhis":
            return self.n_chains * (1 + self.n_burn + self.n_kept)
        return self.n_samples

    def check(self, method: str) -> None:
        if method in ("itgis", "naive") and (self.n_batches < 1 or self.batch_size < 1):
            raise InputError("budget needs n_batches >= 1 and batch_size >= 1")
        if method == "mhis" and (self.n_chains < 1 or self.n_kept < 1 or self.n_burn < 0):
            raise InputError("budget needs n_chains >= 1, n_kept >= 1, n_burn >= 0")
        if method in ("qld", "gld") and self.n_samples < 2:
            raise InputError("budget needs n_samples >= 2")


@dataclass(frozen=True)
class EstimateRecord:
    method: str
    target: int
    raw_estimate: float
    model_calls_used: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.raw_estimate >= 0):
            raise InputError(f"raw estimate must be >= 0, got {self.raw_estimate}")
        object.__setattr__(self, "diagnostics", MappingProxyType(dict(self.diagnostics)))


CSV_FIELDS = ["method", "target", "raw_estimate", "calls", "diagnostics"]


def write_records(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([
                r.method, r.target, repr(float(r.raw_estimate)), r.model_calls_used,
                json.dumps(dict(r.diagnostics), sort_keys=True),
            ])


def read_records(path) -> list[EstimateRecord]:
    with Path(path).open() as f:
        return [
            EstimateRecord(row["method"], int(row["target"]), float(row["raw_estimate"]),
                           int(row["calls"]), json.loads(row["diagnostics"]))
            for row in csv.DictReader(f)
        ]
