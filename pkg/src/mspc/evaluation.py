"""Confusion matrices and IoU / accuracy / precision metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import NUM_CLASSES, UNLABELED, LandCoverClass


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = actual class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}")
        if (c < 0).any():
            raise ValueError("confusion counts must be >= 0")
        object.__setattr__(self, "counts", c)

    @classmethod
    def zeros(cls) -> "ConfusionMatrix":
        return cls(np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros((NUM_CLASSES, NUM_CLASSES)), where=rows > 0)


def confusion(pred, true) -> ConfusionMatrix:
    """Count (actual, predicted) pairs; points with Unlabeled truth are skipped."""
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    keep = true != UNLABELED
    p, t = pred[keep].astype(np.int64), true[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= NUM_CLASSES or t.min() < 0 or t.max() >= NUM_CLASSES):
        raise ValueError("labels must be class codes 0..5 (or 255 for unlabeled truth)")
    counts = np.bincount(t * NUM_CLASSES + p, minlength=NUM_CLASSES ** 2)
    return ConfusionMatrix(counts.reshape(NUM_CLASSES, NUM_CLASSES))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise ratio with NaN where the denominator is zero (undefined)."""
    num = np.asarray(num, np.float64)
    den = np.asarray(den, np.float64)
    return np.divide(num, den, out=np.full(num.shape, np.nan), where=den > 0)


def iou_all(cm: ConfusionMatrix) -> np.ndarray:
    return _ratio(cm.tp(), cm.tp() + cm.fp() + cm.fn())


def accuracy_all(cm: ConfusionMatrix) -> np.ndarray:
    return _ratio(cm.tp(), cm.tp() + cm.fn())


def precision_all(cm: ConfusionMatrix) -> np.ndarray:
    return _ratio(cm.tp(), cm.tp() + cm.fp())


def iou(cm: ConfusionMatrix, c: int) -> Optional[float]:
    """IoU of class ``c``; ``None`` when undefined (class absent everywhere)."""
    v = iou_all(cm)[int(c)]
    return None if np.isnan(v) else float(v)


def accuracy(cm: ConfusionMatrix, c: int) -> Optional[float]:
    v = accuracy_all(cm)[int(c)]
    return None if np.isnan(v) else float(v)


def precision(cm: ConfusionMatrix, c: int) -> Optional[float]:
    v = precision_all(cm)[int(c)]
    return None if np.isnan(v) else float(v)


def class_mean(values: np.ndarray) -> float:
    """Mean over defined (non-NaN) entries; NaN if none is defined."""
    values = np.asarray(values, np.float64)
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else float("nan")


def mean_iou(cm: ConfusionMatrix) -> float:
    return class_mean(iou_all(cm))


@dataclass
class MetricsReport:
    iou: list[Optional[float]]
    accuracy: list[Optional[float]]
    precision: list[Optional[float]]
    miou: float
    macc: float
    mprecision: float
    counts: list[int]
    confusion: list[list[int]] = field(repr=False)
    confusion_normalized: list[list[float]] = field(repr=False)

    def to_dict(self) -> dict:
        names = [c.name.lower() for c in LandCoverClass.labeled()]
        return {
            "miou": self.miou,
            "macc": self.macc,
            "mprecision": self.mprecision,
            "classes": names,
            "iou": self.iou,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "counts": self.counts,
            "confusion": self.confusion,
            "confusion_normalized": self.confusion_normalized,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            iou=d["iou"], accuracy=d["accuracy"], precision=d["precision"],
            miou=d["miou"], macc=d["macc"], mprecision=d["mprecision"],
            counts=d["counts"], confusion=d["confusion"],
            confusion_normalized=d["confusion_normalized"],
        )

    def render(self) -> str:
        """Fixed-width text table, values rounded to three decimals."""
        def f(v):
            return "  -  " if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.3f}"

        lines = [f"{'class':<16}{'IoU':>8}{'Acc':>8}{'Prec':>8}{'points':>10}"]
        for i, c in enumerate(LandCoverClass.labeled()):
            lines.append(
                f"{c.display_name:<16}{f(self.iou[i]):>8}{f(self.accuracy[i]):>8}"
                f"{f(self.precision[i]):>8}{self.counts[i]:>10}"
            )
        lines.append(f"{'mean':<16}{f(self.miou):>8}{f(self.macc):>8}{f(self.mprecision):>8}")
        lines.append("")
        lines.append("row-normalized confusion (rows = actual)")
        for i, c in enumerate(LandCoverClass.labeled()):
            lines.append(f"{c.display_name:<16}" + "".join(f"{v:>8.3f}" for v in self.confusion_normalized[i]))
        return "\n".join(lines)


def _opt(values: np.ndarray) -> list[Optional[float]]:
    return [None if np.isnan(v) else float(v) for v in values]


def report(cm: ConfusionMatrix) -> MetricsReport:
    i, a, p = iou_all(cm), accuracy_all(cm), precision_all(cm)
    return MetricsReport(
        iou=_opt(i),
        accuracy=_opt(a),
        precision=_opt(p),
        miou=class_mean(i),
        macc=class_mean(a),
        mprecision=class_mean(p),
        counts=cm.counts.sum(axis=1).tolist(),
        confusion=cm.counts.tolist(),
        confusion_normalized=cm.row_normalized().tolist(),
    )


def matrix_csv(matrix, fmt: str = "{}") -> str:
    names = [c.name.lower() for c in LandCoverClass.labeled()]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["actual\\predicted"] + names)
    for name, row in zip(names, matrix):
        w.writerow([name] + [fmt.format(v) for v in row])
    return buf.getvalue()
