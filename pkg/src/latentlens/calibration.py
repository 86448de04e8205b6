"""Threshold calibration of certainty scores against human interpretability labels."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateLabels

DEFAULT_EPSILON = 0.7434
TABLE_COLUMNS = ("Uncertainty Estimate", "AUC", "F1-score", "Precision", "Recall")


@dataclass(frozen=True)
class LabeledScore:
    sequence_id: str
    certainty: float
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class CalibrationResult:
    epsilon: float
    auc: float
    f1: float
    precision: float
    recall: float
    threshold_candidates_evaluated: int

    def to_dict(self) -> dict:
        return asdict(self)


def _arrays(scores: Sequence[LabeledScore]):
    s = np.array([x.certainty for x in scores], dtype=np.float64)
    y = np.array([x.label for x in scores], dtype=np.int64)
    return s, y


def _check_classes(y):
    if y.size == 0 or y.min() == y.max():
        raise DegenerateLabels("both positive and negative labels are required")


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: Sequence[LabeledScore]) -> float:
    """Pair-counting AUC (ties credit 1/2), computed from average ranks."""
    s, y = _arrays(scores)
    _check_classes(y)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    rank_sum = _average_ranks(s)[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_at(scores: Sequence[LabeledScore], threshold: float) -> tuple:
    """(precision, recall, f1) when predicting positive for certainty >= threshold."""
    if not scores:
        raise ValueError("no scores")
    s, y = _arrays(scores)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def threshold_candidates(values) -> list:
    """Midpoints of consecutive distinct scores, bracketed by one value below and one above."""
    distinct = sorted(set(float(v) for v in values))
    mids = [(a + b) / 2.0 for a, b in zip(distinct[:-1], distinct[1:])]
    return [distinct[0] - 1.0] + mids + [distinct[-1] + 1.0]


def calibrate_threshold(scores: Sequence[LabeledScore]) -> CalibrationResult:
    """Pick the candidate threshold with the best F1 (then precision, then larger threshold)."""
    s, y = _arrays(scores)
    _check_classes(y)
    candidates = threshold_candidates(s)
    best_key, best = None, None
    for t in candidates:
        p, r, f1 = confusion_at(scores, t)
        key = (f1, p, t)
        if best_key is None or key > best_key:
            best_key, best = key, (t, p, r, f1)
    t, p, r, f1 = best
    return CalibrationResult(t, roc_auc(scores), f1, p, r, len(candidates))


def calibration_table_csv(rows) -> str:
    """``rows`` is a sequence of (estimate name, CalibrationResult)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for name, res in rows:
        writer.writerow([name, f"{res.auc:.4f}", f"{res.f1:.4f}",
                         f"{res.precision:.4f}", f"{res.recall:.4f}"])
    return buf.getvalue()
