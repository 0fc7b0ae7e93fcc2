"""Unknown-class detection by probability threshold, and the metric suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import TIERS, ClassSpaceSpec
from .errors import ConfigError, PreconditionError, ValidationError

UNKNOWN = -1


def predict_class(probs: np.ndarray, delta: float, labels=None) -> np.ndarray:
    """Argmax class, or UNKNOWN when every class probability is strictly below ``delta``.

    Ties go to the lowest column. ``labels`` maps columns to class labels
    (identity when omitted).
    """
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    probs = np.asarray(probs, dtype=np.float64)
    cols = np.argmax(probs, axis=1)  # first maximum wins
    out = cols if labels is None else np.asarray(labels, dtype=np.int64)[cols]
    out = out.astype(np.int64)
    out[np.all(probs < delta, axis=1)] = UNKNOWN
    return out


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(percentile / 100.0 * ordered.size))
    return float(ordered[rank - 1])


def calibrate_delta(probs_on_validation: np.ndarray, percentile: float = 5.0, eps: float = 1e-6) -> float:
    """Nearest-rank percentile of validation row maxima, clamped into (1/|C| + eps, 1 - eps)."""
    if not 0 < percentile < 100:
        raise PreconditionError(f"percentile must lie strictly between 0 and 100, got {percentile}")
    probs = np.asarray(probs_on_validation, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise PreconditionError("calibrate_delta needs a non-empty validation set")
    delta = nearest_rank(probs.max(axis=1), percentile)
    lo = 1.0 / probs.shape[1] + eps
    hi = 1.0 - eps
    return float(min(max(delta, lo), hi))


def h_score(acc_known: float, acc_unknown: float) -> float:
    total = acc_known + acc_unknown
    return 0.0 if total == 0 else 2.0 * acc_known * acc_unknown / total


@dataclass
class EvalResult:
    acc_known: float
    acc_unknown_detect: float
    h_score: float
    tier_acc: dict[str, float | None]
    confusion: np.ndarray
    delta_used: float | None = None
    tier_counts: dict[str, int] = field(default_factory=dict)


def evaluate(predictions, truth, spec: ClassSpaceSpec, delta_used: float | None = None) -> EvalResult:
    """Known-class accuracy, unknown-detection accuracy, H-score and per-tier accuracy.

    The confusion matrix is indexed by known classes in sorted order with a
    final row/column for "unknown"; every truth label from the unknown set
    lands in that last row.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValidationError(f"{pred.size} predictions for {true.size} truth labels")
    known = spec.known
    k = len(known)
    index = {label: i for i, label in enumerate(known)}
    unknown_set = spec.target_unknown

    def row_of(label: int) -> int:
        if label in index:
            return index[label]
        if label in unknown_set:
            return k
        raise ValidationError(f"truth label {label} is outside the target class space")

    def col_of(label: int) -> int:
        if label == UNKNOWN:
            return k
        if label in index:
            return index[label]
        raise ValidationError(f"predicted label {label} is neither a known class nor unknown")

    confusion = np.zeros((k + 1, k + 1), dtype=np.int64)
    for t, p in zip(true.tolist(), pred.tolist()):
        confusion[row_of(t), col_of(p)] += 1

    n_known = int(confusion[:k].sum())
    n_unknown = int(confusion[k].sum())
    acc_known = float(np.trace(confusion[:k, :k]) / n_known) if n_known else 0.0
    acc_unknown = float(confusion[k, k] / n_unknown) if n_unknown else 0.0

    tiers = spec.tiers()
    tier_acc: dict[str, float | None] = {}
    tier_counts: dict[str, int] = {}
    for tier in TIERS:
        rows = [index[c] for c in tiers[tier]]
        count = int(confusion[rows].sum()) if rows else 0
        tier_counts[tier] = count
        if not tiers[tier]:
            tier_acc[tier] = None
        else:
            hits = int(sum(confusion[r, r] for r in rows))
            tier_acc[tier] = hits / count if count else None

    return EvalResult(
        acc_known,
        acc_unknown,
        h_score(acc_known, acc_unknown),
        tier_acc,
        confusion,
        delta_used,
        tier_counts,
    )
