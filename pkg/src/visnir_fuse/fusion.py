"""Per-class vegetation-index histograms and late fusion with probabilities.

Histograms are accumulated over the validation split: for each class the
index values of its pixels are counted into fixed-range bins (16 for NDVI
over [-1, 1], 20 for EVI over [-1/3, 2]) and normalized to bin weights.
Fusion adds `beta * weight` of the pixel's bin to the calibrated class
probabilities and re-picks the arg-max.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rasters import FloatGrid, LabelMap, ProbabilityVolume
from .veg_index import EviCoefficients, IndexImage, index_nominal_range

NDVI_BINS = 16
EVI_BINS = 20


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    beta: float = 0.75

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise FusionError("beta must be finite and nonnegative")


@dataclass(frozen=True)
class ClassHistogramModel:
    kind: str
    value_range: tuple[float, float]
    weights: np.ndarray  # (K, n_bins), rows sum to 1 or are all zero
    support: np.ndarray  # (K,) contributing pixel counts

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        s = np.asarray(self.support, dtype=np.int64)
        if w.ndim != 2 or s.shape != (w.shape[0],):
            raise FusionError("weights must be (K, n_bins) with per-class support")
        if (w < 0).any():
            raise FusionError("bin weights must be nonnegative")
        row_sums = w.sum(axis=1)
        bad = np.where(s > 0, np.abs(row_sums - 1.0) > 1e-9, row_sums != 0.0)
        if bad.any():
            raise FusionError("rows must sum to 1 (support > 0) or be all zero")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "support", s)

    @property
    def classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]

    def bin_edges(self) -> np.ndarray:
        lo, hi = self.value_range
        return np.linspace(lo, hi, self.n_bins + 1)


def default_bins(kind: str) -> int:
    return NDVI_BINS if kind == "ndvi" else EVI_BINS


def bin_index(values: np.ndarray, value_range: tuple[float, float], n_bins: int) -> np.ndarray:
    """Bin of each value; out-of-range values clamp into the edge bins."""
    lo, hi = value_range
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * n_bins
    return np.clip(np.floor(scaled).astype(np.int64), 0, n_bins - 1)


def accumulate_histograms(
    samples: list[tuple[IndexImage, LabelMap]],
    kind: str,
    n_bins: int | None = None,
    classes: int | None = None,
    coeffs: EviCoefficients = EviCoefficients(),
) -> ClassHistogramModel:
    """Count index values per class over a sample list and normalize."""
    if not samples:
        raise FusionError("empty sample list")
    if n_bins is None:
        n_bins = default_bins(kind)
    if n_bins <= 0:
        raise FusionError("n_bins must be positive")
    value_range = index_nominal_range(kind, coeffs)
    if classes is None:
        classes = max(
            int(labels.labels[labels.valid_mask()].max(initial=0)) for _, labels in samples
        ) + 1
    counts = np.zeros((classes, n_bins), dtype=np.int64)
    for index, labels in samples:
        if index.kind != kind:
            raise FusionError(f"sample index kind {index.kind!r} does not match {kind!r}")
        if index.grid.values.shape != labels.labels.shape:
            raise FusionError("index image and label map shapes disagree")
        use = labels.valid_mask() & index.valid_mask
        if not use.any():
            continue
        lab = labels.labels[use].astype(np.int64)
        if lab.max() >= classes:
            raise FusionError(f"label {lab.max()} outside the {classes}-class model")
        bins = bin_index(index.grid.values[use], value_range, n_bins)
        np.add.at(counts, (lab, bins), 1)
    support = counts.sum(axis=1)
    weights = np.zeros_like(counts, dtype=np.float64)
    nonzero = support > 0
    weights[nonzero] = counts[nonzero] / support[nonzero, None]
    return ClassHistogramModel(kind, value_range, weights, support)


def merge_histograms(a: ClassHistogramModel, b: ClassHistogramModel) -> ClassHistogramModel:
    """Merge two count-compatible models (counts add)."""
    if a.kind != b.kind or a.n_bins != b.n_bins or a.classes != b.classes:
        raise FusionError("histogram models are not compatible")
    counts = np.rint(a.weights * a.support[:, None]).astype(np.int64) + np.rint(
        b.weights * b.support[:, None]
    ).astype(np.int64)
    support = a.support + b.support
    weights = np.zeros(counts.shape, dtype=np.float64)
    nonzero = support > 0
    weights[nonzero] = counts[nonzero] / support[nonzero, None]
    return ClassHistogramModel(a.kind, a.value_range, weights, support)


def histogram_weights(index_value: float, model: ClassHistogramModel) -> np.ndarray:
    """Per-class normalized bin weight at one index value."""
    b = int(bin_index(np.array([index_value]), model.value_range, model.n_bins)[0])
    return model.weights[:, b].copy()


@dataclass(frozen=True)
class FusionResult:
    labels: LabelMap
    scores: np.ndarray  # (H, W, K) raw fused scores, beta * w + p
    normalized: ProbabilityVolume  # scores / per-pixel sum, for CRF unaries


def fuse(
    calibrated: ProbabilityVolume,
    index: IndexImage,
    model: ClassHistogramModel,
    config: FusionConfig = FusionConfig(),
) -> FusionResult:
    """Add beta-weighted histogram evidence to calibrated probabilities."""
    if index.kind != model.kind:
        raise FusionError(f"index kind {index.kind!r} does not match model kind {model.kind!r}")
    if (calibrated.height, calibrated.width) != index.grid.values.shape:
        raise FusionError("probability volume and index image shapes disagree")
    if calibrated.classes != model.classes:
        raise FusionError(
            f"probability volume has {calibrated.classes} classes, model {model.classes}"
        )
    bins = bin_index(index.grid.values, model.value_range, model.n_bins)
    omega = model.weights.T[bins]  # (H, W, K)
    # histogram evidence only where the index is defined
    omega = np.where(index.valid_mask[:, :, None], omega, 0.0)
    scores = config.beta * omega + calibrated.values
    labels = LabelMap(scores.argmax(axis=2).astype(np.uint8))
    normalized = ProbabilityVolume(scores / scores.sum(axis=2, keepdims=True))
    return FusionResult(labels, scores, normalized)


def save_histogram_csv(model: ClassHistogramModel, path: str | Path, class_names=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    edges = model.bin_edges()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["# kind", model.kind, "range", f"{model.value_range[0]:.9g}",
             f"{model.value_range[1]:.9g}", "bins", model.n_bins]
        )
        writer.writerow(["class", "bin_low", "bin_high", "weight", "support"])
        for k in range(model.classes):
            name = class_names[k] if class_names else str(k)
            for b in range(model.n_bins):
                writer.writerow(
                    [name, f"{edges[b]:.9g}", f"{edges[b + 1]:.9g}",
                     f"{model.weights[k, b]:.12g}", int(model.support[k])]
                )


def load_histogram_csv(path: str | Path, class_names=None) -> ClassHistogramModel:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0][0] != "# kind":
        raise FusionError(f"{path}: not a histogram model file")
    kind = rows[0][1]
    value_range = (float(rows[0][3]), float(rows[0][4]))
    n_bins = int(rows[0][6])
    data = rows[2:]
    if len(data) % n_bins != 0:
        raise FusionError(f"{path}: row count is not a multiple of the bin count")
    names = []
    for row in data:
        if row[0] not in names:
            names.append(row[0])
    if class_names is not None and list(class_names) != names:
        raise FusionError(f"{path}: class names disagree with the palette")
    weights = np.zeros((len(names), n_bins))
    support = np.zeros(len(names), dtype=np.int64)
    for i, row in enumerate(data):
        k, b = divmod(i, n_bins)
        if row[0] != names[k]:
            raise FusionError(f"{path}: rows are not grouped by class")
        weights[k, b] = float(row[3])
        support[k] = int(row[4])
    return ClassHistogramModel(kind, value_range, weights, support)
