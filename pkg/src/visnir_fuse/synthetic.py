"""Synthetic fixtures: calibrated logit generators and a four-class scene.

The scene mimics the failure mode the pipeline targets: two vegetation
classes that look identical in VIS (so the network confuses them) but
separate cleanly in NIR, plus two ground classes the network already gets
right. Logits are overconfident by a configurable factor so calibration
has something to undo.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest, SampleRecord, save_manifest
from .rasters import IGNORE_VALUE, LabelMap, LabelPalette, LogitVolume, RasterImage, save_labelmap_png, save_palette, save_raster
from .tensor_io import write_tensor

SCENE_PALETTE = LabelPalette(
    names=("asphalt", "soil", "low grass", "high grass"),
    colors=((64, 64, 64), (120, 80, 40), (120, 200, 80), (40, 140, 40)),
)

ASPHALT, SOIL, LOW_GRASS, HIGH_GRASS = range(4)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    ex = np.exp(z)
    return ex / ex.sum(axis=-1, keepdims=True)


def sample_calibrated_logits(
    height: int,
    width: int,
    classes: int,
    rng: np.random.Generator,
    spread: float = 2.0,
    scale: float = 1.0,
) -> tuple[LogitVolume, LabelMap]:
    """Random logits with labels drawn from their own softmax.

    With scale = 1 the data is perfectly calibrated by construction and
    the NLL-optimal temperature is ~1; scaling the logits by s makes the
    optimum ~s.
    """
    z = rng.normal(0.0, spread, size=(height, width, classes))
    p = softmax_rows(z)
    cum = np.cumsum(p, axis=2)
    u = rng.uniform(size=(height, width, 1))
    labels = (u > cum).sum(axis=2).astype(np.uint8)
    return LogitVolume(z * scale), LabelMap(labels)


def scene_labels(size: int) -> np.ndarray:
    """Band of asphalt on top, soil at the bottom, grass halves between."""
    labels = np.empty((size, size), dtype=np.uint8)
    band = size // 4
    labels[:band, :] = ASPHALT
    labels[-band:, :] = SOIL
    labels[band:-band, : size // 2] = LOW_GRASS
    labels[band:-band, size // 2 :] = HIGH_GRASS
    return labels


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    overconfidence: float = 3.0
    grass_margin_mean: float = 0.35
    grass_margin_std: float = 1.1
    ground_margin: float = 4.0
    nir_levels: tuple[int, int, int, int] = (40, 60, 90, 180)  # per class
    red_levels: tuple[int, int, int, int] = (90, 110, 60, 60)
    blue_levels: tuple[int, int, int, int] = (90, 70, 40, 40)
    pixel_noise: float = 6.0
    ignore_fraction: float = 0.01


def generate_scene(rng: np.random.Generator, params: SceneParams = SceneParams()):
    """One VIS/NIR/label/logit quadruple (arrays, not files)."""
    size = params.size
    labels = scene_labels(size)

    def leveled(levels):
        base = np.asarray(levels, dtype=np.float64)[labels]
        noisy = base + rng.normal(0.0, params.pixel_noise, labels.shape)
        return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)

    nir = leveled(params.nir_levels)
    red = leveled(params.red_levels)
    blue = leveled(params.blue_levels)
    # both grass classes share one VIS appearance: green channel from red
    green = np.clip(red.astype(np.int64) + 20, 0, 255).astype(np.uint8)
    vis = np.stack([red, green, blue], axis=2)

    z = np.zeros((size, size, 4))
    grass = (labels == LOW_GRASS) | (labels == HIGH_GRASS)
    ground = ~grass
    # ground classes: confident and correct
    margins = rng.normal(params.ground_margin, 0.5, labels.shape)
    z[ground, labels[ground]] = margins[ground]
    z[:, :, LOW_GRASS][ground] = rng.normal(-1.0, 0.5, labels.shape)[ground]
    z[:, :, HIGH_GRASS][ground] = rng.normal(-1.0, 0.5, labels.shape)[ground]
    # grass classes: the network cannot tell them apart reliably
    grass_margin = rng.normal(
        params.grass_margin_mean, params.grass_margin_std, labels.shape
    )
    base = rng.normal(1.5, 0.3, labels.shape)
    z[:, :, LOW_GRASS][grass] = np.where(
        labels[grass] == LOW_GRASS,
        base[grass] + grass_margin[grass] / 2.0,
        base[grass] - grass_margin[grass] / 2.0,
    )
    z[:, :, HIGH_GRASS][grass] = np.where(
        labels[grass] == HIGH_GRASS,
        base[grass] + grass_margin[grass] / 2.0,
        base[grass] - grass_margin[grass] / 2.0,
    )
    z[:, :, ASPHALT][grass] = rng.normal(-1.5, 0.4, labels.shape)[grass]
    z[:, :, SOIL][grass] = rng.normal(-1.5, 0.4, labels.shape)[grass]
    z *= params.overconfidence

    out_labels = labels.copy()
    n_ignore = int(params.ignore_fraction * size * size)
    if n_ignore:
        flat = rng.choice(size * size, size=n_ignore, replace=False)
        out_labels.reshape(-1)[flat] = IGNORE_VALUE

    return (
        RasterImage(vis),
        RasterImage(nir),
        LabelMap(out_labels),
        LogitVolume(z),
    )


IDENTITY_RIG_TEXT = (
    "vis_intrinsics = 500 500 32 32\n"
    "nir_intrinsics = 500 500 32 32\n"
    "rotation = 1 0 0 0 1 0 0 0 1\n"
    "translation = 0 0 0\n"
    "plane_normal = 0 -1 0\n"
    "plane_distance = 1.5\n"
)


def write_scene_dataset(
    root: str | Path,
    n_val: int = 4,
    n_test: int = 4,
    seed: int = 0,
    params: SceneParams = SceneParams(),
) -> Path:
    """Materialize a synthetic dataset; returns the manifest path."""
    root = Path(root)
    for sub in ("images", "labels", "logits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_val + n_test):
        split = "val" if i < n_val else "test"
        sid = f"scene_{i:03d}"
        vis, nir, labels, logits = generate_scene(rng, params)
        vis_p = root / "images" / f"{sid}_vis.png"
        nir_p = root / "images" / f"{sid}_nir.png"
        lab_p = root / "labels" / f"{sid}.png"
        log_p = root / "logits" / f"{sid}.vnf"
        save_raster(vis, vis_p)
        save_raster(nir, nir_p)
        save_labelmap_png(labels, SCENE_PALETTE, lab_p)
        write_tensor(logits.values.astype(np.float32), log_p)
        records.append(
            SampleRecord(sid, vis_p, nir_p, lab_p, log_p, split)
        )
    manifest_path = root / "manifest.txt"
    save_manifest(DatasetManifest(tuple(records)), manifest_path)
    (root / "rig.txt").write_text(IDENTITY_RIG_TEXT)
    save_palette(SCENE_PALETTE, root / "palette.txt")
    return manifest_path
