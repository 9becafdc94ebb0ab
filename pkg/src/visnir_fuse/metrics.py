"""Confusion-matrix evaluation: per-class IoU and mIoU over a class subset.

Ground-truth ignore pixels are excluded; classes absent from both the
prediction and the ground truth have an undefined IoU and are left out of
the mean (the convention is switchable via `undefined_as_zero`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rasters import LabelMap, LabelPalette


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = ground truth, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise MetricsError("confusion matrix must be square")
        if (c < 0).any():
            raise MetricsError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c)

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @staticmethod
    def empty(classes: int) -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((classes, classes), dtype=np.int64))

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise MetricsError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate_confusion(
    pred: LabelMap,
    gt: LabelMap,
    existing: ConfusionMatrix,
    eval_mask: np.ndarray | None = None,
) -> ConfusionMatrix:
    """Add one image's counts; gt ignore pixels (and masked-out pixels) skip."""
    if pred.labels.shape != gt.labels.shape:
        raise MetricsError("prediction and ground truth shapes disagree")
    k = existing.classes
    use = gt.valid_mask()
    if eval_mask is not None:
        mask = np.asarray(eval_mask, dtype=bool)
        if mask.shape != gt.labels.shape:
            raise MetricsError("evaluation mask shape disagrees with labels")
        use &= mask
    g = gt.labels[use].astype(np.int64)
    p = pred.labels[use].astype(np.int64)
    if g.size and (g.max() >= k or p.max() >= k):
        raise MetricsError(f"label outside the {k}-class matrix")
    counts = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(existing.counts + counts)


@dataclass(frozen=True)
class IouReport:
    per_class: dict[int, float | None]  # None = undefined (absent everywhere)
    mean_iou: float


def iou(
    matrix: ConfusionMatrix,
    class_subset: list[int] | None = None,
    undefined_as_zero: bool = False,
) -> IouReport:
    """IoU_k = TP / (TP + FP + FN); mean over the subset's defined classes."""
    if class_subset is None:
        class_subset = list(range(matrix.classes))
    if not class_subset:
        raise MetricsError("empty class subset")
    c = matrix.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class: dict[int, float | None] = {}
    defined = []
    for k in class_subset:
        if not 0 <= k < matrix.classes:
            raise MetricsError(f"class {k} outside the matrix")
        if denom[k] == 0:
            per_class[k] = 0.0 if undefined_as_zero else None
            if undefined_as_zero:
                defined.append(0.0)
        else:
            value = float(tp[k] / denom[k])
            per_class[k] = value
            defined.append(value)
    if not defined:
        raise MetricsError("no class in the subset occurs in the data")
    return IouReport(per_class, float(np.mean(defined)))


def save_metrics_csv(
    report: IouReport,
    palette: LabelPalette,
    path: str | Path,
) -> None:
    """One row per class with IoU in percent (2 decimals), then the mean."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou_percent"])
        for k in sorted(report.per_class):
            value = report.per_class[k]
            name = palette.names[k] if k < len(palette) else str(k)
            writer.writerow([name, "undefined" if value is None else f"{100.0 * value:.2f}"])
        writer.writerow(["mIoU", f"{100.0 * report.mean_iou:.2f}"])


def load_metrics_csv(path: str | Path) -> tuple[dict[str, float | None], float]:
    """Read back a metrics CSV as ({class name: IoU fraction}, mIoU fraction)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["class", "iou_percent"]:
        raise MetricsError(f"{path}: not a metrics CSV")
    per_class: dict[str, float | None] = {}
    mean_iou = None
    for name, value in rows[1:]:
        if name == "mIoU":
            mean_iou = float(value) / 100.0
        else:
            per_class[name] = None if value == "undefined" else float(value) / 100.0
    if mean_iou is None:
        raise MetricsError(f"{path}: missing mIoU row")
    return per_class, mean_iou
