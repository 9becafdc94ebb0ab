"""Fully-connected CRF with Gaussian pairwise kernels, solved by mean field.

Two kernels with Potts label compatibility: a smoothness kernel over pixel
positions (std theta_gamma) and an appearance kernel over positions and
guide intensities (stds theta_alpha / theta_beta). The guide can be the
VIS image, the warped NIR image, or a vegetation index; one-channel guides
are mapped affinely to [0, 255] so theta_beta means the same thing across
modalities.

Update rule, identical in the fast and naive paths: with per-pixel kernel
normalization over the self-excluded neighborhood,

    msg_m(i, k) = sum_{j != i} G_m(f_i, f_j) Q_j(k) / sum_{j != i} G_m(f_i, f_j)
    Q_i(k) propto u_i(k) * exp(sum_m w_m * msg_m(i, k))

All pixels update in parallel from the previous iteration's marginals.
The class-independent Potts term common to all labels is dropped; it
cancels in the per-pixel normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import EXACT_LIMIT, GaussianFilterBank
from .rasters import LabelMap, ProbabilityVolume, RasterImage
from .veg_index import IndexImage, index_nominal_range

UNARY_FLOOR = 1e-8
_NORM_EPS = 1e-12


class CrfError(ValueError):
    pass


@dataclass(frozen=True)
class CrfConfig:
    theta_alpha: float = 10.0
    theta_beta: float = 13.0
    theta_gamma: float = 3.0
    w_appearance: float = 10.0
    w_smoothness: float = 3.0
    iterations: int = 10

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise CrfError("kernel widths must be positive")
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise CrfError("kernel weights must be nonnegative")
        if self.iterations < 0:
            raise CrfError("iteration count must be nonnegative")


@dataclass(frozen=True)
class GuidanceImage:
    """Guide intensities in [0, 255], shape (H, W, C) with C in {1, 3}."""

    intensities: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise CrfError("guidance image must be (H, W) or (H, W, 1|3)")
        if not np.isfinite(arr).all():
            raise CrfError("guidance intensities must be finite")
        object.__setattr__(self, "intensities", arr)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @staticmethod
    def from_raster(image: RasterImage) -> "GuidanceImage":
        arr = image.samples.astype(np.float64)
        if image.depth == 16:
            arr = arr * (255.0 / 65535.0)
        return GuidanceImage(arr)

    @staticmethod
    def from_index(index: IndexImage, coeffs=None) -> "GuidanceImage":
        from .veg_index import EviCoefficients

        lo, hi = index_nominal_range(index.kind, coeffs or EviCoefficients())
        arr = (index.grid.values - lo) / (hi - lo) * 255.0
        return GuidanceImage(np.clip(arr, 0.0, 255.0))


def _positions(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _kernel_features(guide: GuidanceImage, config: CrfConfig):
    pos = _positions(guide.height, guide.width)
    smooth = pos / config.theta_gamma
    intens = guide.intensities.reshape(-1, guide.intensities.shape[2])
    appear = np.concatenate([pos / config.theta_alpha, intens / config.theta_beta], axis=1)
    return smooth, appear


def _check_inputs(unaries: ProbabilityVolume, guide: GuidanceImage):
    if (guide.height, guide.width) != (unaries.height, unaries.width):
        raise CrfError(
            f"guide {guide.width}x{guide.height} does not match unaries "
            f"{unaries.width}x{unaries.height}"
        )


def mean_field(
    unaries: ProbabilityVolume,
    guide: GuidanceImage,
    config: CrfConfig = CrfConfig(),
    iteration_callback=None,
) -> tuple[ProbabilityVolume, LabelMap]:
    """Run mean-field inference; returns final marginals and arg-max labels.

    Filtering dispatches to the exact kernel sum for small images and the
    permutohedral lattice beyond EXACT_LIMIT pixels.
    """
    _check_inputs(unaries, guide)
    h, w, k = unaries.values.shape
    labels_of = lambda q: LabelMap(q.reshape(h, w, k).argmax(axis=2).astype(np.uint8))

    active = []
    if config.w_smoothness > 0:
        active.append(("smooth", config.w_smoothness))
    if config.w_appearance > 0:
        active.append(("appear", config.w_appearance))
    if config.iterations == 0 or not active:
        return unaries, labels_of(unaries.values)

    smooth_f, appear_f = _kernel_features(guide, config)
    filters = {}
    norms = {}
    ones = np.ones((h * w, 1))
    for name, _ in active:
        bank = GaussianFilterBank(smooth_f if name == "smooth" else appear_f)
        filters[name] = bank
        norm = bank.apply(ones)[:, 0] - 1.0  # exclude the self term
        # isolated pixels (no effective neighbors) receive no message
        norms[name] = (np.maximum(norm, _NORM_EPS), norm > _NORM_EPS)

    u = unaries.values.reshape(-1, k)
    log_u = np.log(np.maximum(u, UNARY_FLOOR))
    q = u.copy()
    for it in range(config.iterations):
        logits = log_u.copy()
        for name, weight in active:
            filtered = filters[name].apply(q)
            norm, has_neighbors = norms[name]
            msg = np.where(has_neighbors[:, None], (filtered - q) / norm[:, None], 0.0)
            logits += weight * msg
        if not np.isfinite(logits).all():
            raise CrfError(f"non-finite intermediate at iteration {it}")
        logits -= logits.max(axis=1, keepdims=True)
        ex = np.exp(logits)
        q = ex / ex.sum(axis=1, keepdims=True)
        if iteration_callback is not None:
            iteration_callback(it, q.reshape(h, w, k).copy())
    marginals = ProbabilityVolume(q.reshape(h, w, k))
    return marginals, labels_of(q)


def naive_mean_field(
    unaries: ProbabilityVolume,
    guide: GuidanceImage,
    config: CrfConfig = CrfConfig(),
) -> ProbabilityVolume:
    """Verification oracle: the same updates with explicit pairwise loops."""
    _check_inputs(unaries, guide)
    h, w, k = unaries.values.shape
    n = h * w
    if n > EXACT_LIMIT:
        raise CrfError(f"naive path limited to {EXACT_LIMIT} pixels, got {n}")

    active = []
    if config.w_smoothness > 0:
        active.append(("smooth", config.w_smoothness))
    if config.w_appearance > 0:
        active.append(("appear", config.w_appearance))
    if config.iterations == 0 or not active:
        return unaries

    smooth_f, appear_f = _kernel_features(guide, config)
    feats = {"smooth": smooth_f, "appear": appear_f}

    u = unaries.values.reshape(n, k)
    u_floor = np.maximum(u, UNARY_FLOOR)
    q = u.copy()
    for _ in range(config.iterations):
        q_new = np.empty_like(q)
        for i in range(n):
            boost = np.zeros(k)
            for name, weight in active:
                f = feats[name]
                acc = np.zeros(k)
                norm = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    diff = f[i] - f[j]
                    g = np.exp(-0.5 * float(diff @ diff))
                    acc += g * q[j]
                    norm += g
                if norm > _NORM_EPS:
                    boost += weight * acc / norm
            scores = u_floor[i] * np.exp(boost)
            q_new[i] = scores / scores.sum()
        q = q_new
    return ProbabilityVolume(q.reshape(h, w, k))
