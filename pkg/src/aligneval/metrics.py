"""Evaluation metrics: rank correlation, linear correlation, hit accuracy,
their fixed-weight combination, and a grid search for the best hit threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAIN_SCORE_WEIGHTS = (0.25, 0.25, 0.5)  # plcc, srcc, acc
DEFAULT_THRESHOLD_STEP = 0.01


class MetricError(ValueError):
    """Raised for undefined metric inputs (length mismatch, constant vectors)."""


def _as_vector(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise MetricError(f"{name} is not a 1-d sequence")
    if not np.all(np.isfinite(arr)):
        raise MetricError(f"{name} contains a non-finite value")
    return arr


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if len(pred) != len(truth):
        raise MetricError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if len(pred) < 2:
        raise MetricError("need at least 2 points")
    if np.ptp(pred) == 0.0:
        raise MetricError("predictions are constant; correlation is undefined")
    if np.ptp(truth) == 0.0:
        raise MetricError("truths are constant; correlation is undefined")


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks where tied values share the mean of their rank positions."""
    arr = _as_vector(values, "values")
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def plcc(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson product-moment correlation between predictions and truths.

    Args:
        pred: predicted scores.
        truth: reference scores, same length.

    Returns:
        Correlation in [-1, 1].

    Raises:
        MetricError: on length mismatch, fewer than 2 points, or a constant
            input (the correlation is undefined, never silently 0).
    """
    p = _as_vector(pred, "pred")
    t = _as_vector(truth, "truth")
    _check_pair(p, t)
    dp = p - p.mean()
    dt = t - t.mean()
    return float(np.dot(dp, dt) / math.sqrt(np.dot(dp, dp) * np.dot(dt, dt)))


def srcc(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks.

    Ties share their mean rank, so tied data is handled exactly; on tie-free
    data this equals the classic 1 - 6*sum(d^2)/(n*(n^2-1)) form.
    """
    p = _as_vector(pred, "pred")
    t = _as_vector(truth, "truth")
    _check_pair(p, t)
    return plcc(average_ranks(p), average_ranks(t))


def element_accuracy(pred_hits: Sequence[int], truth_hits: Sequence[int]) -> float:
    """Fraction of element hit decisions matching the reference decisions."""
    if len(pred_hits) != len(truth_hits):
        raise MetricError(
            f"length mismatch: {len(pred_hits)} predictions vs {len(truth_hits)} truths"
        )
    if len(pred_hits) == 0:
        raise MetricError("no hit decisions to score")
    for name, hits in (("pred_hits", pred_hits), ("truth_hits", truth_hits)):
        if any(h not in (0, 1) for h in hits):
            raise MetricError(f"{name} contains a non-binary decision")
    matches = sum(1 for a, b in zip(pred_hits, truth_hits) if a == b)
    return matches / len(pred_hits)


def main_score(srcc_value: float, plcc_value: float, acc_value: float) -> float:
    """Fixed-weight combination: plcc/4 + srcc/4 + acc/2."""
    for name, value, lo, hi in (
        ("srcc", srcc_value, -1.0, 1.0),
        ("plcc", plcc_value, -1.0, 1.0),
        ("acc", acc_value, 0.0, 1.0),
    ):
        if not lo <= value <= hi:
            raise MetricError(f"{name} {value} outside [{lo}, {hi}]")
    w_plcc, w_srcc, w_acc = MAIN_SCORE_WEIGHTS
    return w_plcc * plcc_value + w_srcc * srcc_value + w_acc * acc_value


def threshold_candidates(lo: float, hi: float, step: float) -> list[float]:
    """Scanned thresholds: one step below the minimum, then min..max by step.

    The extra leading candidate makes the all-hit labeling reachable under
    the strict pred > t rule (at t = min(pred) the minimum itself would miss).
    """
    if step <= 0.0:
        raise MetricError(f"step {step} must be positive")
    candidates = [lo - step]
    k = 0
    while True:
        t = lo + k * step
        if t > hi + 1e-12:
            break
        candidates.append(t)
        k += 1
    return candidates


def optimal_threshold_search(
    pred_scores: Sequence[float],
    truth_hits: Sequence[int],
    step: float = DEFAULT_THRESHOLD_STEP,
) -> tuple[float, float]:
    """Grid-search the decision threshold maximizing hit accuracy.

    A prediction counts as a hit when strictly above the threshold. The grid
    is anchored at min(pred_scores) with the given fixed step (plus one
    candidate a single step lower); ties are broken toward the smallest
    threshold.

    Returns:
        (best threshold, accuracy at that threshold).
    """
    scores = _as_vector(pred_scores, "pred_scores")
    if len(scores) == 0:
        raise MetricError("no scores to threshold")
    if len(scores) != len(truth_hits):
        raise MetricError(
            f"length mismatch: {len(scores)} scores vs {len(truth_hits)} truths"
        )
    if any(h not in (0, 1) for h in truth_hits):
        raise MetricError("truth_hits contains a non-binary decision")
    truths = np.asarray(truth_hits, dtype=np.int64)
    best_t = math.nan
    best_acc = -1.0
    for t in threshold_candidates(float(scores.min()), float(scores.max()), step):
        acc = float(np.mean((scores > t).astype(np.int64) == truths))
        if acc > best_acc:
            best_acc = acc
            best_t = t
    return best_t, best_acc


@dataclass
class MetricsReport:
    """Evaluation summary over one prediction set."""

    srcc: float
    plcc: float
    acc: float
    main_score: float
    n_samples: int
    n_elements: int

    def as_record(self) -> dict:
        return {
            "srcc": self.srcc,
            "plcc": self.plcc,
            "acc": self.acc,
            "main_score": self.main_score,
            "n_samples": self.n_samples,
            "n_elements": self.n_elements,
        }


def compute_report(
    pred_totals: Sequence[float],
    truth_totals: Sequence[float],
    pred_hits: Sequence[int],
    truth_hits: Sequence[int],
) -> MetricsReport:
    """Score total predictions and element hit decisions in one report."""
    s = srcc(pred_totals, truth_totals)
    p = plcc(pred_totals, truth_totals)
    a = element_accuracy(pred_hits, truth_hits)
    return MetricsReport(
        srcc=s,
        plcc=p,
        acc=a,
        main_score=main_score(s, p, a),
        n_samples=len(pred_totals),
        n_elements=len(pred_hits),
    )


def format_report_table(report: MetricsReport) -> str:
    """Aligned human-readable rendering for terminal output."""
    rows = [
        ("srcc", f"{report.srcc:.6f}"),
        ("plcc", f"{report.plcc:.6f}"),
        ("acc", f"{report.acc:.6f}"),
        ("main_score", f"{report.main_score:.6f}"),
        ("n_samples", str(report.n_samples)),
        ("n_elements", str(report.n_elements)),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
