"""
LossTracker - Loss trace accumulation

Collects the per-iteration records of a fit and summarises the initial, final
and best values for display and tracking.
"""

import math
from dataclasses import dataclass, field
from typing import Optional


@dataclass
class LossSummary:
    """Summary of a loss trace"""
    iterations: int = 0
    initial_rec: float = math.nan
    final_rec: float = math.nan
    best_rec: float = math.nan
    best_iteration: int = 0
    final_mae: Optional[float] = None

    def is_empty(self) -> bool:
        return self.iterations == 0

    @property
    def reduction(self) -> float:
        """final / initial reconstruction loss"""
        if self.is_empty() or self.initial_rec == 0:
            return math.nan
        return self.final_rec / self.initial_rec


@dataclass
class LossTracker:
    """
    Loss trace tracker

    Records are any objects with iteration, rec, weak, lambda_w, lr and mae
    attributes (the fit's LossRecord).
    """
    records: list = field(default_factory=list)

    def update(self, record) -> None:
        self.records.append(record)

    def latest(self):
        return self.records[-1] if self.records else None

    def summary(self) -> LossSummary:
        if not self.records:
            return LossSummary()
        best = min(self.records, key=lambda r: r.rec)
        return LossSummary(
            iterations=len(self.records),
            initial_rec=self.records[0].rec,
            final_rec=self.records[-1].rec,
            best_rec=best.rec,
            best_iteration=best.iteration,
            final_mae=self.records[-1].mae,
        )

    def as_metrics(self) -> list[dict[str, float]]:
        """Per-iteration metric dicts (mae omitted when absent)"""
        rows = []
        for r in self.records:
            row = {"L_rec": r.rec, "L_weak": r.weak, "lambda_w": r.lambda_w, "lr": r.lr}
            if r.mae is not None:
                row["mae"] = r.mae
            rows.append(row)
        return rows

    def reset(self) -> None:
        self.records.clear()
