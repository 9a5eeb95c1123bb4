"""Confusion-matrix based classification metrics.

Rows are true classes, columns predicted classes. Precision/recall/F1 use
the 0/0 -> 0 convention; MCC is the multiclass R_K statistic.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, LabelError

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.ndim != 2 or self.counts.shape[1] != k:
            raise DimensionError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")
        if not self.class_names:
            self.class_names = [str(i) for i in range(k)]
        elif len(self.class_names) != k:
            raise DimensionError(f"{len(self.class_names)} class names for a {k}x{k} matrix")

    @classmethod
    def empty(cls, num_classes: int, class_names: list[str] | None = None) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), list(class_names or []))

    @classmethod
    def from_labels(cls, true, pred, num_classes: int, class_names: list[str] | None = None) -> "ConfusionMatrix":
        cm = cls.empty(num_classes, class_names)
        cm.update(true, pred)
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_label: int, pred_label: int) -> "ConfusionMatrix":
        k = self.num_classes
        if not (0 <= true_label < k and 0 <= pred_label < k):
            raise LabelError(f"labels ({true_label}, {pred_label}) outside [0, {k})")
        self.counts[true_label, pred_label] += 1
        return self

    def update(self, true, pred) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if true.shape != pred.shape:
            raise DimensionError(f"{true.shape[0]} true labels vs {pred.shape[0]} predictions")
        k = self.num_classes
        bad = (true < 0) | (true >= k) | (pred < 0) | (pred >= k)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LabelError(f"labels ({true[i]}, {pred[i]}) at position {i} outside [0, {k})")
        np.add.at(self.counts, (true, pred), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise DimensionError(f"cannot merge {other.counts.shape} into {self.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))


def accumulate(cm: ConfusionMatrix, true_label: int, pred_label: int) -> ConfusionMatrix:
    return cm.accumulate(true_label, pred_label)


def _safe_div(num: float, den: float, what: str) -> float:
    if den == 0:
        log.warning("%s is 0/0; reporting 0", what)
        return 0.0
    return num / den


def per_class_prf(cm: ConfusionMatrix) -> list[tuple[float, float, float]]:
    c = cm.counts
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    true_tot = c.sum(axis=1)
    out = []
    for k in range(cm.num_classes):
        name = cm.class_names[k]
        p = _safe_div(tp[k], pred_tot[k], f"precision of class {name!r}")
        r = _safe_div(tp[k], true_tot[k], f"recall of class {name!r}")
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        out.append((float(p), float(r), float(f)))
    return out


def averaged(cm: ConfusionMatrix, mode: str = "macro") -> tuple[float, float, float]:
    """Macro (plain mean over classes) or weighted (support-weighted) P/R/F1."""
    prf = np.array(per_class_prf(cm))
    if mode == "macro":
        w = np.full(cm.num_classes, 1.0 / cm.num_classes)
    elif mode == "weighted":
        support = cm.counts.sum(axis=1).astype(np.float64)
        if support.sum() == 0:
            raise ContractError("weighted average of an empty confusion matrix")
        w = support / support.sum()
    else:
        raise ValueError(f"mode must be 'macro' or 'weighted', got {mode!r}")
    p, r, f = (w[:, None] * prf).sum(axis=0)
    return float(p), float(r), float(f)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def mcc(cm: ConfusionMatrix) -> float:
    c = cm.counts.astype(np.float64)
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    s = c.sum()
    cov = np.trace(c) * s - float(p @ t)
    den = (s * s - float(p @ p)) * (s * s - float(t @ t))
    if den == 0:
        return 0.0
    return float(cov / math.sqrt(den))


def report(cm: ConfusionMatrix) -> dict:
    """All Table-1 style metrics as a flat dict."""
    mp, mr, mf = averaged(cm, "macro")
    wp, wr, wf = averaged(cm, "weighted")
    return {
        "macro_precision": mp,
        "macro_recall": mr,
        "macro_f1": mf,
        "weighted_precision": wp,
        "weighted_recall": wr,
        "weighted_f1": wf,
        "accuracy": accuracy(cm),
        "mcc": mcc(cm),
    }


REPORT_COLUMNS = [
    ("macro_precision", "Macro P"),
    ("macro_recall", "Macro R"),
    ("macro_f1", "Macro F1"),
    ("weighted_precision", "Weighted P"),
    ("weighted_recall", "Weighted R"),
    ("weighted_f1", "Weighted F1"),
    ("accuracy", "Accuracy"),
    ("mcc", "MCC"),
]


def report_json(cm: ConfusionMatrix) -> str:
    return json.dumps(
        {
            "metrics": report(cm),
            "per_class": [
                {"class": name, "precision": p, "recall": r, "f1": f, "support": int(s)}
                for name, (p, r, f), s in zip(cm.class_names, per_class_prf(cm), cm.counts.sum(axis=1))
            ],
            "confusion_matrix": cm.counts.tolist(),
            "class_names": cm.class_names,
        },
        indent=2,
    )


def report_table(cm: ConfusionMatrix, method: str = "FocalConvNet") -> str:
    """Aligned text table in Table-1 column order."""
    vals = report(cm)
    headers = ["Method"] + [h for _, h in REPORT_COLUMNS]
    cells = [method] + [f"{vals[k]:.4f}" for k, _ in REPORT_COLUMNS]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    line = lambda row: " | ".join(x.ljust(w) for x, w in zip(row, widths))
    return "\n".join([line(headers), "-+-".join("-" * w for w in widths), line(cells)])
