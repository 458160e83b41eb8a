"""Confusion accumulation, per-class IoU and base/novel mIoU summaries."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .vocab import CategorySchema
from .volumes import EMPTY, INVALID


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions, index 0 is empty space.

    ``unmatched[c]`` counts GT-``c`` voxels whose prediction falls outside 0..K.
    """

    counts: np.ndarray
    unmatched: np.ndarray = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.unmatched is None:
            self.unmatched = np.zeros(self.counts.shape[0], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.unmatched.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.unmatched + other.unmatched)


def accumulate(pred, gt, num_classes: int, ignore=(EMPTY,)) -> ConfusionMatrix:
    """Count (gt, pred) pairs over voxels whose GT is not ignored; 255 is always ignored.

    Empty space (0) is ignored by default; pass ``ignore=()`` to include it.
    """
    pred = np.asarray(getattr(pred, "labels", pred)).reshape(-1).astype(np.int64)
    gt = np.asarray(getattr(gt, "labels", gt)).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground-truth volumes differ in size")
    n = num_classes + 1
    keep = gt != INVALID
    for c in ignore:
        keep &= gt != c
    p, g = pred[keep], gt[keep]
    if np.any(g > num_classes):
        raise ValueError("ground-truth label outside schema")
    inside = p <= num_classes
    counts = np.bincount(g[inside] * n + p[inside], minlength=n * n).reshape(n, n)
    unmatched = np.bincount(g[~inside], minlength=n)
    return ConfusionMatrix(counts, unmatched)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the denominator is zero."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) + cm.unmatched - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


@dataclass
class EvalReport:
    class_names: list[str]
    subsets: list[str]
    ious: list[float | None]
    base_mean: float | None
    novel_mean: float | None
    evaluated: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": [{"name": n, "iou": _r(i), "subset": s}
                        for n, i, s in zip(self.class_names, self.ious, self.subsets)],
            "base_mean": _r(self.base_mean),
            "novel_mean": _r(self.novel_mean),
            "evaluated_voxels": self.evaluated,
            **self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "iou", "subset"])
        for n, i, s in zip(self.class_names, self.ious, self.subsets):
            w.writerow([n, "" if i is None else f"{i:.4f}", s])
        return buf.getvalue()


def _r(v):
    return None if v is None or np.isnan(v) else round(float(v), 4)


def _mean(values):
    vals = [v for v in values if v is not None and not np.isnan(v)]
    return float(np.mean(vals)) if vals else None


def summarize(ious, schema: CategorySchema, evaluated: int = 0) -> EvalReport:
    """Per-class IoU in schema order with novel and base means (undefined classes excluded)."""
    ious = np.asarray(ious, dtype=np.float64)
    names, subsets, vals = [], [], []
    for name in schema.names:
        cid = schema.id_of(name)
        v = ious[cid] if cid < ious.shape[0] else np.nan
        names.append(name)
        subsets.append("novel" if name in schema.novel else "base")
        vals.append(None if np.isnan(v) else float(v))
    base = _mean([v for v, s in zip(vals, subsets) if s == "base"])
    novel = _mean([v for v, s in zip(vals, subsets) if s == "novel"])
    return EvalReport(names, subsets, vals, base, novel, evaluated)


def evaluate(pred, gt, schema: CategorySchema, include_empty: bool = False) -> EvalReport:
    cm = accumulate(pred, gt, schema.num_classes, ignore=() if include_empty else (EMPTY,))
    report = summarize(iou_per_class(cm), schema, cm.total)
    if include_empty:
        report.extras["empty_iou"] = _r(iou_per_class(cm)[0])
    return report
