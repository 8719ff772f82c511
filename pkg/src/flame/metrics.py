"""Confusion-matrix metrics: accuracy plus one-vs-rest precision, recall and F1."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.counts.tolist())


@dataclass
class MetricReport:
    """All scores are percentages."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    f1_class_mean: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    average: str = "macro"
    warnings: list[str] = field(default_factory=list)

    def as_row(self) -> dict:
        row = {"accuracy": self.accuracy, "precision": self.precision,
               "recall": self.recall, "f1": self.f1, "f1_class_mean": self.f1_class_mean}
        for name, values in (("precision", self.per_class_precision),
                             ("recall", self.per_class_recall), ("f1", self.per_class_f1)):
            for c, v in enumerate(values):
                row[f"{name}_{c}"] = float(v)
        return row


def confusion(labels, predictions, n_classes: int) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    if labels.shape != predictions.shape:
        raise ValueError(f"{labels.size} labels vs {predictions.size} predictions")
    for name, v in (("label", labels), ("prediction", predictions)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} out of range for {n_classes} classes")
    flat = np.bincount(labels * n_classes + predictions, minlength=n_classes * n_classes)
    return ConfusionMatrix(flat.reshape(n_classes, n_classes))


def _ratio(num, den, what, c, warnings):
    if den == 0:
        warnings.append(f"class {c}: {what} is 0/0, set to 0")
        return 0.0
    return 100.0 * num / den


def _harmonic(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def report(cm: ConfusionMatrix, average: str = "macro") -> MetricReport:
    """Scores from a confusion matrix.

    ``average="macro"`` takes the unweighted class mean of precision and
    recall and forms F1 from those two means. ``"micro"`` pools TP/FP/FN,
    which for single-label data makes all three equal to accuracy.
    """
    if average not in ("macro", "micro"):
        raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")
    counts = np.asarray(cm.counts)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts).astype(float)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    warnings: list[str] = []
    prec = np.array([_ratio(tp[c], predicted[c], "precision", c, warnings) for c in range(len(tp))])
    rec = np.array([_ratio(tp[c], actual[c], "recall", c, warnings) for c in range(len(tp))])
    f1s = np.array([_harmonic(p, r) for p, r in zip(prec, rec)])
    accuracy = float(100.0 * tp.sum() / total)
    if average == "macro":
        p, r = float(prec.mean()), float(rec.mean())
    else:
        p = r = accuracy
    return MetricReport(accuracy, p, r, float(_harmonic(p, r)), float(f1s.mean()),
                        prec, rec, f1s, average, warnings)


def evaluate(labels, predictions, n_classes: int, average: str = "macro") -> MetricReport:
    return report(confusion(labels, predictions, n_classes), average)


def write_metrics_csv(path, rows: list[dict]):
    if not rows:
        raise ValueError("no metric rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})
