"""Ground-plane homography between the NIR and VIS cameras, plus warping.

The NIR camera sits directly under the VIS camera with shared orientation,
so a single plane-induced homography maps NIR pixels into the VIS frame:

    H = K_vis (R + t n^T / d) K_nir^{-1}

Warping is destination-scan with bilinear sampling; target pixels whose
source footprint leaves the NIR image are zeroed and flagged invalid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rasters import RasterImage


class GeometryError(ValueError):
    """Raised for degenerate camera or rig parameters."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class RigGeometry:
    """Relative NIR->VIS pose and the ground plane in NIR coordinates."""

    rotation: np.ndarray
    translation: np.ndarray
    plane_normal: np.ndarray
    plane_distance: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.asarray(self.plane_normal, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if abs(np.linalg.det(r) - 1.0) > 1e-9 or np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise GeometryError("rotation must be orthonormal with determinant 1")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be a unit vector")
        if not self.plane_distance > 0:
            raise GeometryError("plane distance must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "plane_normal", n)


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError("homography must be 3x3")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise GeometryError("homography is singular")
        object.__setattr__(self, "matrix", m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))


def plane_homography(
    k_vis: CameraIntrinsics, k_nir: CameraIntrinsics, rig: RigGeometry
) -> Homography:
    """Plane-induced homography in canonical scale (bottom-right entry 1)."""
    h = (
        k_vis.matrix()
        @ (rig.rotation + np.outer(rig.translation, rig.plane_normal) / rig.plane_distance)
        @ np.linalg.inv(k_nir.matrix())
    )
    if abs(np.linalg.det(h)) <= 1e-12:
        raise GeometryError("degenerate rig: resulting homography is singular")
    if h[2, 2] != 0.0:
        h = h / h[2, 2]
    return Homography(h)


def warp_to_vis(
    nir: RasterImage, h: Homography, out_width: int, out_height: int
) -> tuple[RasterImage, np.ndarray]:
    """Warp an image into the VIS frame by inverse mapping.

    Returns the warped raster plus a boolean validity mask; invalid
    (unmapped) pixels are zero and excluded downstream.
    """
    h_inv = np.linalg.inv(h.matrix)
    ys, xs = np.mgrid[0:out_height, 0:out_width]
    ones = np.ones_like(xs, dtype=np.float64)
    src = h_inv @ np.stack([xs.ravel(), ys.ravel(), ones.ravel()])
    w = src[2]
    valid = np.abs(w) > 1e-12
    sx = np.where(valid, src[0] / np.where(valid, w, 1.0), -1.0)
    sy = np.where(valid, src[1] / np.where(valid, w, 1.0), -1.0)

    src_h, src_w = nir.height, nir.width
    valid &= (sx >= 0) & (sx <= src_w - 1) & (sy >= 0) & (sy <= src_h - 1)

    # clamp the base corner so an exact right/bottom edge sample carries
    # fractional weight 1.0 instead of indexing out of bounds
    xi = np.clip(np.floor(sx), 0, max(src_w - 2, 0)).astype(np.int64)
    yi = np.clip(np.floor(sy), 0, max(src_h - 2, 0)).astype(np.int64)
    fx = np.clip(sx - xi, 0.0, 1.0)
    fy = np.clip(sy - yi, 0.0, 1.0)
    xi1 = np.minimum(xi + 1, src_w - 1)
    yi1 = np.minimum(yi + 1, src_h - 1)

    samples = nir.samples.astype(np.float64)
    if samples.ndim == 2:
        samples = samples[:, :, None]
    out = np.zeros((out_height * out_width, samples.shape[2]), dtype=np.float64)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    for c in range(samples.shape[2]):
        plane = samples[:, :, c]
        out[:, c] = (
            w00 * plane[yi, xi]
            + w10 * plane[yi, xi1]
            + w01 * plane[yi1, xi]
            + w11 * plane[yi1, xi1]
        )
    out[~valid] = 0.0

    max_val = 2**nir.depth - 1
    dtype = nir.samples.dtype
    quantized = np.clip(np.rint(out), 0, max_val).astype(dtype)
    quantized = quantized.reshape(out_height, out_width, samples.shape[2])
    if nir.samples.ndim == 2:
        quantized = quantized[:, :, 0]
    return RasterImage(quantized), valid.reshape(out_height, out_width)


def load_rig_file(path: str | Path) -> tuple[CameraIntrinsics, CameraIntrinsics, RigGeometry]:
    """Parse a calibration file of `key = numbers...` lines.

    Required keys: vis_intrinsics / nir_intrinsics (fx fy cx cy),
    rotation (9 row-major), translation (3), plane_normal (3),
    plane_distance (1).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"calibration file not found: {path}")
    entries: dict[str, list[float]] = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GeometryError(f"{path}: expected 'key = numbers', got {raw!r}")
        key, vals = (part.strip() for part in line.split("=", 1))
        try:
            entries[key] = [float(v) for v in vals.replace(",", " ").split()]
        except ValueError:
            raise GeometryError(f"{path}: non-numeric value in line {raw!r}") from None

    def take(key: str, n: int) -> list[float]:
        if key not in entries:
            raise GeometryError(f"{path}: missing key {key!r}")
        if len(entries[key]) != n:
            raise GeometryError(f"{path}: key {key!r} needs {n} numbers, got {len(entries[key])}")
        return entries[key]

    k_vis = CameraIntrinsics(*take("vis_intrinsics", 4))
    k_nir = CameraIntrinsics(*take("nir_intrinsics", 4))
    rig = RigGeometry(
        rotation=np.array(take("rotation", 9)).reshape(3, 3),
        translation=np.array(take("translation", 3)),
        plane_normal=np.array(take("plane_normal", 3)),
        plane_distance=take("plane_distance", 1)[0],
    )
    return k_vis, k_nir, rig
