"""Binary classification metrics over pooled stock-day predictions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1", "mcc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float

    def as_row(self) -> tuple[float, float, float, float, float]:
        return (self.accuracy, self.precision, self.recall, self.f1, self.mcc)


def classify(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 iff p > threshold; a tie counts as negative, like the label rule."""
    probs = np.asarray(probs, dtype=np.float64)
    return (probs > threshold).astype(np.int64)


def confusion(preds: np.ndarray, labels: np.ndarray) -> ConfusionCounts:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    pred_pos = preds == 1
    label_pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred_pos & label_pos)),
        tn=int(np.sum(~pred_pos & ~label_pos)),
        fp=int(np.sum(pred_pos & ~label_pos)),
        fn=int(np.sum(~pred_pos & label_pos)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    """Accuracy, precision, recall, F1 and Matthews correlation coefficient.

    Any metric whose denominator is zero (including MCC when a confusion
    margin is empty, i.e. constant predictions) is reported as 0 so skewed
    batches never fail.
    """
    if counts.total == 0:
        raise ValueError("no predictions to score")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    accuracy = (tp + tn) / counts.total
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    mcc_den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = (tp * tn - fp * fn) / mcc_den if mcc_den > 0 else 0.0
    return MetricsReport(accuracy=accuracy, precision=precision, recall=recall, f1=f1, mcc=mcc)


def format_report(report: MetricsReport, counts: ConfusionCounts) -> str:
    """Aligned text table plus class-balance counts, so heavy skew towards one
    predicted class is visible next to the headline numbers."""
    header = "".join(f"{name.capitalize():>11s}" for name in METRIC_COLUMNS)
    values = "".join(f"{value:>11.4f}" for value in report.as_row())
    pos_pred = counts.tp + counts.fp
    pos_label = counts.tp + counts.fn
    balance = (
        f"predicted positive: {pos_pred}/{counts.total}  "
        f"actual positive: {pos_label}/{counts.total}  "
        f"(tp={counts.tp} tn={counts.tn} fp={counts.fp} fn={counts.fn})"
    )
    return f"{header}\n{values}\n{balance}\n"


def write_metrics_csv(path: str | Path, report: MetricsReport) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        writer.writerow([f"{value:.17g}" for value in report.as_row()])
