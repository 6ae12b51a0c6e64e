from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

WP_TOLERANCE = 0.5


@dataclass
class MetricReport:
    mrse: float
    mrse_median: float
    mape: float
    wp_percent: float
    n: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def to_text(self) -> str:
        rows = [("MRSE", self.mrse), ("mRSE", self.mrse_median), ("MAPE", self.mape),
                ("WP (%)", self.wp_percent)]
        lines = [f"{name:<8}{value:>14.6f}" for name, value in rows]
        lines.append(f"{'n':<8}{self.n:>14d}")
        return "\n".join(lines)


def compute_metrics(pred, truth) -> MetricReport:
    """Relative-error metrics for cascade-size predictions.

    A prediction counts as wrong when its relative error strictly exceeds 0.5.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.size == 0 or pred.size != truth.size:
        raise ValueError(f"need equally many predictions and truths, got {pred.size} and {truth.size}")
    if np.any(truth <= 0):
        raise ValueError("true sizes must be positive")
    rel = (pred - truth) / truth
    sq = rel * rel
    return MetricReport(
        mrse=float(np.mean(sq)),
        mrse_median=float(np.median(sq)),
        mape=float(np.mean(np.abs(rel))),
        wp_percent=float(100.0 * np.mean(np.abs(rel) > WP_TOLERANCE)),
        n=int(pred.size),
    )
