"""Shared raster and tensor types plus PNG loading/saving.

All containers are thin immutable wrappers around numpy arrays with the
shape/range invariants checked at construction time. Pixel layout is
row-major with the origin in the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_VALUE = 255

# Per-pixel probability vectors must sum to one within this tolerance.
PROB_SUM_TOL = 1e-5


class RasterError(ValueError):
    """Raised for unsupported or inconsistent raster data."""


@dataclass(frozen=True)
class RasterImage:
    """8- or 16-bit image, grayscale (H, W) or RGB (H, W, 3)."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.dtype == np.uint8:
            pass
        elif s.dtype == np.uint16:
            if s.ndim == 3:
                raise RasterError("16-bit rasters must be single channel")
        else:
            raise RasterError(f"unsupported sample dtype {s.dtype} (need uint8/uint16)")
        if s.ndim == 3 and s.shape[2] != 3:
            raise RasterError(f"expected 1 or 3 channels, got {s.shape[2]}")
        if s.ndim not in (2, 3):
            raise RasterError(f"expected 2-D or 3-D sample array, got ndim={s.ndim}")
        object.__setattr__(self, "samples", s)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 2 else self.samples.shape[2]

    @property
    def depth(self) -> int:
        return 8 if self.samples.dtype == np.uint8 else 16

    def reflectance(self) -> np.ndarray:
        """Samples scaled to [0, 1] floats by the full range of the bit depth."""
        return self.samples.astype(np.float64) / float(2**self.depth - 1)

    def channel(self, index: int) -> np.ndarray:
        if self.channels == 1:
            if index != 0:
                raise RasterError(f"channel {index} out of range for grayscale image")
            return self.samples
        return self.samples[:, :, index]


@dataclass(frozen=True)
class FloatGrid:
    """Single-channel grid of finite real values, shape (H, W)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise RasterError(f"FloatGrid expects a 2-D array, got ndim={v.ndim}")
        if not np.isfinite(v).all():
            raise RasterError("FloatGrid values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LogitVolume:
    """Per-pixel, per-class raw network outputs, shape (H, W, K)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if v.ndim != 3:
            raise RasterError(f"logit volume expects a 3-D array, got ndim={v.ndim}")
        if not np.isfinite(v).all():
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise RasterError(f"non-finite value at flat index {bad}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ProbabilityVolume:
    """Per-pixel class distributions: values in [0, 1], rows summing to one."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise RasterError(f"probability volume expects a 3-D array, got ndim={v.ndim}")
        if not np.isfinite(v).all():
            raise RasterError("probabilities must be finite")
        if v.min() < -PROB_SUM_TOL or v.max() > 1.0 + PROB_SUM_TOL:
            raise RasterError("probabilities must lie in [0, 1]")
        sums = v.sum(axis=2)
        err = np.abs(sums - 1.0).max() if sums.size else 0.0
        if err > PROB_SUM_TOL:
            raise RasterError(f"per-pixel probability sums deviate from 1 by {err:g}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices with a reserved ignore value."""

    labels: np.ndarray
    ignore_value: int = IGNORE_VALUE

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise RasterError(f"label map expects a 2-D array, got ndim={lab.ndim}")
        if lab.dtype != np.uint8:
            if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
                raise RasterError("labels must fit in uint8")
            lab = lab.astype(np.uint8)
        object.__setattr__(self, "labels", lab)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def valid_mask(self) -> np.ndarray:
        return self.labels != self.ignore_value


@dataclass(frozen=True)
class LabelPalette:
    """Ordered class names and display colors; index = class id."""

    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]
    ignore_value: int = IGNORE_VALUE

    def __post_init__(self):
        if len(self.names) != len(self.colors):
            raise RasterError("palette names and colors must have equal length")
        if len(set(self.names)) != len(self.names):
            raise RasterError("palette class names must be unique")
        if len(self.names) >= self.ignore_value:
            raise RasterError("palette too large for the reserved ignore value")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "colors", tuple(tuple(int(c) for c in rgb) for rgb in self.colors))

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise RasterError(f"unknown class name {name!r}") from None


# Nine quantitatively evaluated classes plus the two annotated-only ones.
DEFAULT_PALETTE = LabelPalette(
    names=(
        "asphalt",
        "gravel",
        "soil",
        "low grass",
        "high grass",
        "bush",
        "tree crown",
        "tree trunk",
        "forest",
        "pole",
        "obstacle",
    ),
    colors=(
        (64, 64, 64),
        (150, 140, 120),
        (120, 80, 40),
        (120, 200, 80),
        (40, 140, 40),
        (90, 160, 110),
        (0, 100, 0),
        (110, 70, 20),
        (10, 60, 10),
        (200, 200, 60),
        (220, 40, 40),
    ),
)


def validate_labels(label_map: LabelMap, palette: LabelPalette) -> None:
    """Check every non-ignore label indexes into the palette."""
    lab = label_map.labels
    bad = lab[(lab != label_map.ignore_value) & (lab >= len(palette))]
    if bad.size:
        raise RasterError(
            f"label value {int(bad[0])} outside palette of {len(palette)} classes"
        )


def load_raster(path: str | Path) -> RasterImage:
    """Load an 8/16-bit grayscale or 8-bit RGB image file.

    Anything else (float TIFFs, palettized or RGBA PNGs, ...) is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
        elif mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(im, dtype=np.uint16)
        elif mode == "I":
            arr = np.asarray(im)
            if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
                raise RasterError(f"{path}: integer image exceeds 16-bit range")
            arr = arr.astype(np.uint16)
        elif mode == "RGB":
            arr = np.asarray(im, dtype=np.uint8)
        else:
            raise RasterError(f"{path}: unsupported image mode {mode!r}")
    return RasterImage(arr)


def save_raster(image: RasterImage, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.samples).save(path, format="PNG")


def load_labelmap(path: str | Path, ignore_value: int = IGNORE_VALUE) -> LabelMap:
    raster = load_raster(path)
    if raster.channels != 1 or raster.depth != 8:
        raise RasterError(f"{path}: label maps must be 8-bit single channel")
    return LabelMap(raster.samples, ignore_value=ignore_value)


def save_labelmap_png(
    label_map: LabelMap,
    palette: LabelPalette,
    path: str | Path,
    colorized_path: str | Path | None = None,
) -> None:
    """Write labels as an 8-bit PNG, optionally with an RGB companion."""
    validate_labels(label_map, palette)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(label_map.labels).save(path, format="PNG")
    if colorized_path is not None:
        table = np.zeros((256, 3), dtype=np.uint8)
        for idx, rgb in enumerate(palette.colors):
            table[idx] = rgb
        rgb_img = table[label_map.labels]
        Image.fromarray(rgb_img).save(colorized_path, format="PNG")


def load_palette(path: str | Path, ignore_value: int = IGNORE_VALUE) -> LabelPalette:
    """Read a palette file: one `name = r,g,b` per line, '#' comments."""
    names, colors = [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RasterError(f"{path}: malformed palette line {raw!r}")
        name, rgb = (part.strip() for part in line.split("=", 1))
        parts = [p.strip() for p in rgb.split(",")]
        if len(parts) != 3:
            raise RasterError(f"{path}: color must be r,g,b in line {raw!r}")
        names.append(name)
        colors.append(tuple(int(p) for p in parts))
    return LabelPalette(tuple(names), tuple(colors), ignore_value=ignore_value)


def save_palette(palette: LabelPalette, path: str | Path) -> None:
    lines = [f"{n} = {r},{g},{b}" for n, (r, g, b) in zip(palette.names, palette.colors)]
    Path(path).write_text("\n".join(lines) + "\n")
