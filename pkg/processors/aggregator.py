"""
Loss-history aggregation
Combines training histories from several runs (seeds) and summarises them
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np

from models.acoustic import LossWeights


@dataclass
class LossEntry:
    """One logged training step"""
    step: int
    rec: float
    hpc: float
    ce: float
    total: float

    @classmethod
    def from_row(cls, row: Dict[str, float]) -> "LossEntry":
        return cls(int(row["step"]), row["rec"], row["hpc"], row["ce"], row["total"])


class LossAggregator:
    """Aggregates loss histories from one or more training runs"""

    def __init__(self, weights: LossWeights = LossWeights()):
        self.weights = weights

    def combine(self, runs: Sequence[Sequence[float]]) -> List[float]:
        """Median value per step across runs (seeds), over the steps every run reached"""
        runs = [list(run) for run in runs if run]
        if not runs:
            return []
        steps = min(len(run) for run in runs)
        totals = np.array([run[:steps] for run in runs], dtype=np.float64)
        return list(np.median(totals, axis=0))

    def window_means(self, totals: Sequence[float], window: int) -> List[float]:
        """Means of consecutive windows (epoch averages); the last window may be short"""
        return [float(np.mean(totals[i:i + window])) for i in range(0, len(totals), window)]

    def weighted_sum_error(self, entries: Sequence[LossEntry]) -> float:
        """Largest relative gap between a logged total and alpha*rec + beta*hpc + gamma*ce"""
        worst = 0.0
        for e in entries:
            expected = self.weights.alpha * e.rec + self.weights.beta * e.hpc + self.weights.gamma * e.ce
            worst = max(worst, abs(e.total - expected) / max(abs(expected), 1e-12))
        return worst

    def get_statistics(self, entries: Sequence[LossEntry]) -> Dict[str, Any]:
        """Generate statistics from one loss history"""
        if not entries:
            return {}
        totals = [e.total for e in entries]
        return {
            "steps": len(entries),
            "first_step": entries[0].step,
            "last_step": entries[-1].step,
            "first_total": totals[0],
            "last_total": totals[-1],
            "best_total": min(totals),
            "improvement": totals[-1] / totals[0] if totals[0] else float("nan"),
            "last": {"rec": entries[-1].rec, "hpc": entries[-1].hpc, "ce": entries[-1].ce},
            "weighted_sum_error": self.weighted_sum_error(entries),
            "window_means": self.window_means(totals, max(len(totals) // 10, 1)),
        }
