"""Evaluation metrics, trade-off scoring, and the high-frequency period filter.

Hotspot conventions are declared, not discovered: a hotspot is a valid cell
with positive ground truth at a step, and the predicted set takes the same
number of top-ranked valid cells. The high-frequency period keeps the
top-quartile hour-of-week buckets by train-split accident totals. Both rules
are recorded in every MetricReport.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyMaskError, InsufficientHistoryError
from .synth import HOURS_PER_WEEK

HOTSPOT_RULE = "truth>0; |pred set| = |true set| per step"
HIGH_FREQ_RULE = "top 25% hour-of-week buckets by train-split totals (ties by bucket index)"
HIGH_FREQ_BUCKETS = math.ceil(0.25 * HOURS_PER_WEEK)  # 42
TRADEOFF_WEIGHTS = (0.5, 0.25, 0.25)


def _stack(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr[None, ...] if arr.ndim == 2 else arr


def rmse(pred, truth, mask) -> float:
    """Root mean squared error over valid cells, pooled across steps."""
    p, t = _stack(pred), _stack(truth)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("rmse: mask has no valid cells")
    diff = (p - t)[:, m]
    return float(np.sqrt(np.mean(diff**2)))


def _step_rank(pred_step, m):
    vals = pred_step[m]
    return np.argsort(-vals, kind="stable")  # ties broken by cell order


def recall_at_hotspots(pred, truth, mask):
    """Mean per-step hotspot recall x100; None when no step has a hotspot."""
    p, t = _stack(pred), _stack(truth)
    m = np.asarray(mask, dtype=bool)
    scores = []
    for k in range(p.shape[0]):
        true_hot = np.flatnonzero(t[k][m] > 0)
        if true_hot.size == 0:
            continue
        order = _step_rank(p[k], m)
        picked = set(order[: true_hot.size].tolist())
        scores.append(len(picked & set(true_hot.tolist())) / true_hot.size)
    if not scores:
        return None
    return 100.0 * float(np.mean(scores))


def mean_average_precision(pred, truth, mask):
    """Mean over steps of average precision of the predicted ranking."""
    p, t = _stack(pred), _stack(truth)
    m = np.asarray(mask, dtype=bool)
    aps = []
    for k in range(p.shape[0]):
        relevant = t[k][m] > 0
        m_q = int(relevant.sum())
        if m_q == 0:
            continue
        order = _step_rank(p[k], m)
        hits = 0
        ap = 0.0
        for rank, cell in enumerate(order, start=1):
            if relevant[cell]:
                hits += 1
                ap += hits / rank
        aps.append(ap / m_q)
    if not aps:
        return None
    return float(np.mean(aps))


def tradeoff_score(rmse_value: float, t_forward_norm: float, t_batch_norm: float, weights=TRADEOFF_WEIGHTS) -> float:
    """Weighted accuracy/efficiency score: a*RMSE + b*T_forward + c*T_batch."""
    a, b, c = weights
    if min(a, b, c) < 0:
        raise ValueError("tradeoff_score: weights must be nonnegative")
    return a * rmse_value + b * t_forward_norm + c * t_batch_norm


def normalize_times(times) -> list:
    """Linear map of raw timings onto [1, 10] (min -> 1, max -> 10)."""
    times = [float(t) for t in times]
    lo, hi = min(times), max(times)
    if hi == lo:
        return [1.0 for _ in times]
    return [1.0 + 9.0 * (t - lo) / (hi - lo) for t in times]


def high_frequency_buckets(datasets, samples) -> np.ndarray:
    """Boolean mask over the 168 hour-of-week buckets kept as high-frequency.

    Totals come from the train split, summed over all cities; ties are broken
    by bucket index. Exactly ceil(0.25*168) = 42 buckets are retained.
    """
    totals = np.zeros(HOURS_PER_WEEK)
    for ds in datasets:
        step_sums = ds.targets.sum(axis=(1, 2))
        for i in samples.train_idx:
            t = samples.target_index(int(i))
            totals[int(ds.hour_of_week(t))] += step_sums[t]
    order = sorted(range(HOURS_PER_WEEK), key=lambda b: (-totals[b], b))
    keep = np.zeros(HOURS_PER_WEEK, dtype=bool)
    keep[order[:HIGH_FREQ_BUCKETS]] = True
    return keep


def high_frequency_filter(datasets, samples) -> np.ndarray:
    """Test-sample indices whose target step falls in a high-frequency bucket."""
    if len(samples.test_idx) < HOURS_PER_WEEK:
        raise InsufficientHistoryError(
            f"high-frequency period needs >= {HOURS_PER_WEEK} test steps, have {len(samples.test_idx)}"
        )
    keep = high_frequency_buckets(datasets, samples)
    ds0 = datasets[0]
    retained = [int(i) for i in samples.test_idx if keep[int(ds0.hour_of_week(samples.target_index(int(i))))]]
    return np.asarray(retained, dtype=int)


@dataclass
class MetricReport:
    """Per-city metrics for one (period, noise level) evaluation."""

    period: str  # "all-day" or "high-freq"
    noise_level: float
    per_city: dict  # city -> {"rmse": float, "recall_pct": float|None, "map": float|None}
    steps: int = 0
    t_forward: float | None = None  # seconds, when measured
    t_batch: float | None = None
    hotspot_rule: str = HOTSPOT_RULE
    high_freq_rule: str = HIGH_FREQ_RULE

    def rows(self) -> list:
        out = []
        for city in sorted(self.per_city):
            m = self.per_city[city]
            out.append(
                {
                    "city": city,
                    "period": self.period,
                    "noise_level": self.noise_level,
                    "rmse": m["rmse"],
                    "recall_pct": m["recall_pct"],
                    "map": m["map"],
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "noise_level": self.noise_level,
            "per_city": self.per_city,
            "steps": self.steps,
            "t_forward": self.t_forward,
            "t_batch": self.t_batch,
            "hotspot_rule": self.hotspot_rule,
            "high_freq_rule": self.high_freq_rule,
        }


CSV_FIELDS = ["city", "period", "noise_level", "rmse", "recall_pct", "map"]


def write_reports_csv(reports, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for report in reports:
            for row in report.rows():
                writer.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in CSV_FIELDS})


def write_reports_json(reports, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
