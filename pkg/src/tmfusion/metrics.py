"""Accuracy, confusion matrices and their text/CSV reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EMOTIONS, NUM_CLASSES
from .errors import ContractError, DimensionError


def confusion_matrix(labels, predictions, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts with rows = true classes, columns = predicted classes."""
    y = np.asarray(labels, dtype=int)
    p = np.asarray(predictions, dtype=int)
    if y.shape != p.shape:
        raise DimensionError(f"{y.size} labels but {p.size} predictions")
    if y.size and (y.min() < 0 or p.min() < 0 or y.max() >= num_classes or p.max() >= num_classes):
        raise ContractError("class index out of range")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


@dataclass
class MetricsReport:
    confusion: np.ndarray
    class_names: Sequence[str] = EMOTIONS

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if self.confusion.ndim != 2 or self.confusion.shape[0] != self.confusion.shape[1]:
            raise DimensionError(f"confusion must be square, got {self.confusion.shape}")

    @classmethod
    def from_predictions(cls, labels, predictions, class_names: Sequence[str] = EMOTIONS) -> "MetricsReport":
        return cls(confusion_matrix(labels, predictions, len(class_names)), class_names)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def recall(self) -> np.ndarray:
        s = self.support
        return np.divide(np.diag(self.confusion), s, out=np.zeros(len(s)), where=s > 0)

    def normalized(self) -> np.ndarray:
        s = self.support[:, None].astype(np.float64)
        return np.divide(self.confusion, s, out=np.zeros(self.confusion.shape), where=s > 0)

    def to_text(self, title: str = "") -> str:
        width = max(len(n) for n in self.class_names) + 2
        lines = [title] if title else []
        lines.append(f"accuracy: {self.accuracy:.4f} ({int(np.trace(self.confusion))}/{self.total})")
        lines.append("confusion (rows true, columns predicted):")
        lines.append(" " * width + "".join(f"{n[:7]:>8}" for n in self.class_names))
        for name, row in zip(self.class_names, self.confusion):
            lines.append(f"{name:<{width}}" + "".join(f"{int(v):>8d}" for v in row))
        lines.append("per-class recall:")
        for name, r, s in zip(self.class_names, self.recall, self.support):
            lines.append(f"  {name:<{width}}{r:.4f}  (n={int(s)})")
        return "\n".join(lines) + "\n"

    def write_confusion_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *self.class_names])
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name, *(int(v) for v in row)])

    def write_text(self, path, title: str = "") -> None:
        Path(path).write_text(self.to_text(title), encoding="utf-8")


def read_confusion_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


def write_predictions_csv(path, video_ids: Sequence[str], scores: np.ndarray, predictions=None,
                          labels=None) -> None:
    """One row per video: id, predicted class index, the class scores, and the true label if known."""
    scores = np.asarray(scores, dtype=np.float64)
    preds = scores.argmax(axis=1) if predictions is None else np.asarray(predictions, dtype=int)
    header = ["video_id", "predicted_class", *[f"score_{n}" for n in EMOTIONS[:scores.shape[1]]]]
    if labels is not None:
        header.append("true_class")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, vid in enumerate(video_ids):
            row = [vid, int(preds[i]), *(repr(float(v)) for v in scores[i])]
            if labels is not None:
                row.append(int(labels[i]))
            w.writerow(row)


def read_predictions_csv(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray | None]:
    """Inverse of :func:`write_predictions_csv`: ids, predictions, scores, labels (or None)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["video_id"] for r in rows]
    preds = np.array([int(r["predicted_class"]) for r in rows], dtype=int)
    score_cols = [k for k in (rows[0] if rows else {}) if k.startswith("score_")]
    scores = np.array([[float(r[k]) for k in score_cols] for r in rows])
    labels = np.array([int(r["true_class"]) for r in rows]) if rows and "true_class" in rows[0] else None
    return ids, preds, scores, labels
