"""Binary classification scores for imbalanced data."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MetricError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def flipped(self) -> "ConfusionMatrix":
        """The same counts seen with class 0 as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


def _check(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true).reshape(-1)
    p = np.asarray(y_pred).reshape(-1)
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.shape[0]} labels vs {p.shape[0]} predictions")
    if t.size == 0:
        raise MetricError("no samples")
    if not (np.isin(t, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise MetricError("labels and predictions must be 0 or 1")
    return t.astype(np.int64), p.astype(np.int64)


def confusion(y_true, y_pred) -> ConfusionMatrix:
    t, p = _check(y_true, y_pred)
    return ConfusionMatrix(
        tp=int(np.sum((t == 1) & (p == 1))),
        fp=int(np.sum((t == 0) & (p == 1))),
        tn=int(np.sum((t == 0) & (p == 0))),
        fn=int(np.sum((t == 1) & (p == 0))),
    )


def precision(cm: ConfusionMatrix) -> float:
    d = cm.tp + cm.fp
    return cm.tp / d if d else 0.0


def recall(cm: ConfusionMatrix) -> float:
    d = cm.tp + cm.fn
    return cm.tp / d if d else 0.0


def f1(cm: ConfusionMatrix) -> float:
    pr, rc = precision(cm), recall(cm)
    return 2 * pr * rc / (pr + rc) if pr + rc > 0 else 0.0


def macro_f1(y_true, y_pred) -> float:
    """Mean of the class-1 and class-0 F1 scores."""
    cm = confusion(y_true, y_pred)
    return (f1(cm) + f1(cm.flipped())) / 2


REPORT_FIELDS = ("appliance", "split", "macro_f1", "f1_pos", "f1_neg", "precision_pos", "recall_pos", "n", "alpha")


def report_row(y_true, y_pred, appliance: str, split: str, alpha: float | None = None) -> dict:
    cm = confusion(y_true, y_pred)
    f_pos, f_neg = f1(cm), f1(cm.flipped())
    return {
        "appliance": appliance,
        "split": split,
        "macro_f1": (f_pos + f_neg) / 2,
        "f1_pos": f_pos,
        "f1_neg": f_neg,
        "precision_pos": precision(cm),
        "recall_pos": recall(cm),
        "n": cm.n,
        "alpha": alpha,
    }


def write_report(rows: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
