"""Per-pixel NDVI and EVI from aligned NIR and VIS rasters.

Inputs are converted to reflectances in [0, 1] before evaluation (both
indices are invariant under that scaling, and it avoids 16-bit integer
overflow). NDVI needs the red channel, EVI red and blue.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .rasters import FloatGrid, RasterImage


class VegIndexError(ValueError):
    """Raised on NDVI/EVI input mismatches."""


NDVI_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class EviCoefficients:
    c1: float = 6.0
    c2: float = 7.5

    def __post_init__(self):
        if not self.c1 > 0:
            raise VegIndexError("c1 must be positive")
        if self.c2 < 0:
            raise VegIndexError("c2 must be nonnegative")


def evi_range(coeffs: EviCoefficients = EviCoefficients()) -> tuple[float, float]:
    return (-2.0 / coeffs.c1, 2.0)


@dataclass(frozen=True)
class IndexImage:
    grid: FloatGrid
    kind: str  # "ndvi" | "evi"
    valid_mask: np.ndarray
    clamp_count: int = 0

    def __post_init__(self):
        if self.kind not in ("ndvi", "evi"):
            raise VegIndexError(f"unknown index kind {self.kind!r}")
        mask = np.asarray(self.valid_mask, dtype=bool)
        if mask.shape != self.grid.values.shape:
            raise VegIndexError("valid mask shape must match the grid")
        object.__setattr__(self, "valid_mask", mask)


def _check_pair(nir: RasterImage, vis: RasterImage, mask: np.ndarray | None) -> np.ndarray:
    if (nir.height, nir.width) != (vis.height, vis.width):
        raise VegIndexError(
            f"dimension mismatch: nir {nir.width}x{nir.height} vs vis {vis.width}x{vis.height}"
        )
    if nir.depth != vis.depth:
        raise VegIndexError(f"bit depth mismatch: nir {nir.depth} vs vis {vis.depth}")
    if vis.channels != 3:
        raise VegIndexError("vis image must be RGB")
    if mask is None:
        return np.ones((nir.height, nir.width), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (nir.height, nir.width):
        raise VegIndexError("mask shape must match images")
    return mask


def ndvi_values(n: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(N - R) / (N + R) on reflectance arrays, defined as 0 where N = R = 0."""
    denom = n + r
    zero = denom == 0.0
    return np.where(zero, 0.0, (n - r) / np.where(zero, 1.0, denom))


def ndvi(nir: RasterImage, vis: RasterImage, mask: np.ndarray | None = None) -> IndexImage:
    """NDVI of an aligned image pair; the warp mask is propagated."""
    valid = _check_pair(nir, vis, mask)
    n = nir.channel(0).astype(np.float64) / (2**nir.depth - 1)
    r = vis.channel(0).astype(np.float64) / (2**vis.depth - 1)
    values = np.where(valid, ndvi_values(n, r), 0.0)
    return IndexImage(FloatGrid(values), "ndvi", valid)


def evi_values(
    n: np.ndarray,
    r: np.ndarray,
    b: np.ndarray,
    coeffs: EviCoefficients = EviCoefficients(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """EVI core on reflectance arrays: (values, defined mask, clamped mask).

    Defined as 0 where N = R = B = 0; with nonnegative inputs any other
    zero denominator is impossible, but signed grids can reach it with a
    nonzero numerator, which marks the pixel undefined. Out-of-range
    results clamp into [-2/c1, 2].
    """
    numer = 2.0 * (n - r)
    denom = n + coeffs.c1 * r + coeffs.c2 * b
    zero_denom = denom == 0.0
    undefined = zero_denom & (numer != 0.0)
    raw = np.where(zero_denom, 0.0, numer / np.where(zero_denom, 1.0, denom))
    lo, hi = evi_range(coeffs)
    clamped = ~undefined & ((raw < lo) | (raw > hi))
    values = np.where(undefined, 0.0, np.clip(raw, lo, hi))
    return values, ~undefined, clamped


def evi(
    nir: RasterImage,
    vis: RasterImage,
    coeffs: EviCoefficients = EviCoefficients(),
    mask: np.ndarray | None = None,
) -> IndexImage:
    """EVI of an aligned image pair with the warp mask propagated."""
    valid = _check_pair(nir, vis, mask)
    scale = float(2**nir.depth - 1)
    n = nir.channel(0).astype(np.float64) / scale
    r = vis.channel(0).astype(np.float64) / scale
    b = vis.channel(2).astype(np.float64) / scale
    values, defined, clamped = evi_values(n, r, b, coeffs)
    valid = valid & defined
    values = np.where(valid, values, 0.0)
    return IndexImage(FloatGrid(values), "evi", valid, clamp_count=int((clamped & valid).sum()))


def index_nominal_range(kind: str, coeffs: EviCoefficients = EviCoefficients()) -> tuple[float, float]:
    if kind == "ndvi":
        return NDVI_RANGE
    if kind == "evi":
        return evi_range(coeffs)
    raise VegIndexError(f"unknown index kind {kind!r}")


def save_index_png(index: IndexImage, path: str | Path, coeffs: EviCoefficients = EviCoefficients()) -> None:
    """Visualization export: nominal range mapped affinely to [0, 255]."""
    lo, hi = index_nominal_range(index.kind, coeffs)
    scaled = (index.grid.values - lo) / (hi - lo) * 255.0
    img = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    img[~index.valid_mask] = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")
