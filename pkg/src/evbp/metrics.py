"""Segmentation / classification metrics: accuracy, per-class IoU, mIoU, P/R/F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEGMENTATION = "segmentation"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class_iou: dict[int, float]  # only classes present in prediction or target
    miou: float
    precision: float
    recall: float
    f1: float

    def class_miou(self, classes) -> float:
        vals = [self.per_class_iou[c] for c in classes if c in self.per_class_iou]
        return float(np.mean(vals)) if vals else float("nan")

    def as_row(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "mIoU": self.miou,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def compute_metrics(
    preds,
    targets,
    n_classes: int,
    kind: str = SEGMENTATION,
    confidence=None,
    threshold: float = 0.5,
    background: int | None = 0,
) -> MetricsReport:
    """Pool all cells (or instances) and score them.

    IoU for class ``k`` is ``|pred==k & gt==k| / |pred==k | gt==k|``; classes
    absent from both are left out of the mean. Precision/recall/F1 count a
    prediction as positive when it names a non-background class and its
    ``confidence`` (default 1) reaches ``threshold``; a positive is a true
    positive when it matches the target.
    """
    p = np.asarray(preds)
    t = np.asarray(targets)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    if kind == SEGMENTATION and p.ndim != 2:
        raise ValueError("segmentation metrics expect (images, cells) label arrays")
    if kind == CLASSIFICATION and p.ndim != 1:
        raise ValueError("classification metrics expect one label per instance")
    if kind not in (SEGMENTATION, CLASSIFICATION):
        raise ValueError(f"unknown kind {kind!r}")
    p = p.ravel()
    t = t.ravel()
    if p.size == 0:
        raise ValueError("no predictions")

    # confusion[i, j]: target i predicted as j
    conf = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    per_class = {k: float(inter[k] / union[k]) for k in range(n_classes) if union[k] > 0}

    c = np.ones(p.shape) if confidence is None else np.asarray(confidence, dtype=np.float64).ravel()
    fg_pred = p != background if background is not None else np.ones(p.shape, dtype=bool)
    fg_true = t != background if background is not None else np.ones(t.shape, dtype=bool)
    positive = fg_pred & (c >= threshold)
    tp = float(np.sum(positive & (p == t)))
    n_pos, n_true = float(positive.sum()), float(fg_true.sum())
    precision = tp / n_pos if n_pos else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    return MetricsReport(
        accuracy=float(np.mean(p == t)),
        per_class_iou=per_class,
        miou=float(np.mean(list(per_class.values()))),
        precision=precision,
        recall=recall,
        f1=f1,
    )
