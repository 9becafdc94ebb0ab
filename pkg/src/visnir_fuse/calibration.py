"""Confidence calibration: softmax, temperature scaling, reliability/ECE.

Global temperature scaling divides all logits by a single T fitted by
NLL minimization on the validation split; local temperature scaling
predicts a per-pixel T from the image and the logits (see temp_net).
Either way the arg-max label is untouched: dividing by a positive
scalar is monotone within a pixel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import temp_net
from .rasters import FloatGrid, LabelMap, LogitVolume, ProbabilityVolume, RasterImage
from .temp_net import LtsTrainConfig, TempNetParams

T_SEARCH_RANGE = (0.05, 20.0)
T_SEARCH_TOL = 1e-4  # in log-space


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class GlobalTemperature:
    t: float
    at_bound: bool = False

    def __post_init__(self):
        if not self.t > 0:
            raise CalibrationError("temperature must be positive")


@dataclass(frozen=True)
class LocalTemperature:
    params: TempNetParams
    uses_nir: bool = False


TemperatureModel = GlobalTemperature | LocalTemperature


def identity_temperature() -> GlobalTemperature:
    return GlobalTemperature(1.0)


def softmax(logits: LogitVolume) -> ProbabilityVolume:
    """Numerically stable per-pixel softmax."""
    z = logits.values.astype(np.float64)
    z = z - z.max(axis=2, keepdims=True)
    ex = np.exp(z)
    return ProbabilityVolume(ex / ex.sum(axis=2, keepdims=True))


def confidence(probs: ProbabilityVolume) -> tuple[FloatGrid, LabelMap]:
    """Max class probability per pixel plus the arg-max labels (ties: lowest index)."""
    values = probs.values
    return FloatGrid(values.max(axis=2)), LabelMap(values.argmax(axis=2).astype(np.uint8))


def image_stack(image: RasterImage | np.ndarray, logits: LogitVolume) -> np.ndarray:
    """Stack image channels (as reflectance) and logit channels to (C, H, W)."""
    if isinstance(image, RasterImage):
        img = image.reflectance()
        img = img[None, :, :] if img.ndim == 2 else np.moveaxis(img, 2, 0)
    else:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[None, :, :]
    if img.shape[1:] != (logits.height, logits.width):
        raise CalibrationError(
            f"image {img.shape[1:]} and logits {(logits.height, logits.width)} disagree"
        )
    return np.concatenate([img, np.moveaxis(logits.values.astype(np.float64), 2, 0)])


def temperature_map(
    temp: TemperatureModel, logits: LogitVolume, image: RasterImage | np.ndarray | None = None
) -> FloatGrid:
    if isinstance(temp, GlobalTemperature):
        return FloatGrid(np.full((logits.height, logits.width), temp.t))
    if image is None:
        raise CalibrationError("local temperature scaling requires the image")
    stack = image_stack(image, logits)
    if stack.shape[0] != temp.params.in_channels:
        raise CalibrationError(
            f"model expects {temp.params.in_channels} input channels, got {stack.shape[0]}"
        )
    return FloatGrid(temp_net.forward(temp.params, stack))


def apply_temperature(
    logits: LogitVolume,
    image: RasterImage | np.ndarray | None,
    temp: TemperatureModel,
) -> tuple[ProbabilityVolume, FloatGrid]:
    """softmax(z / T) with the temperature map actually used."""
    tmap = temperature_map(temp, logits, image)
    scaled = logits.values.astype(np.float64) / tmap.values[:, :, None]
    return softmax(LogitVolume(scaled)), tmap


def nll(
    logits: LogitVolume,
    labels: LabelMap,
    temp: TemperatureModel,
    image: RasterImage | np.ndarray | None = None,
) -> float:
    """Mean negative log-likelihood of the true class over non-ignored pixels."""
    if (labels.height, labels.width) != (logits.height, logits.width):
        raise CalibrationError("label map and logits shapes disagree")
    tmap = temperature_map(temp, logits, image)
    valid = labels.valid_mask()
    if not valid.any():
        raise CalibrationError("all pixels ignored")
    s = logits.values.astype(np.float64) / tmap.values[:, :, None]
    m = s.max(axis=2)
    lse = m + np.log(np.exp(s - m[:, :, None]).sum(axis=2))
    safe = np.where(valid, labels.labels, 0).astype(np.intp)
    s_true = np.take_along_axis(s, safe[:, :, None], axis=2)[:, :, 0]
    return float(np.where(valid, lse - s_true, 0.0).sum() / valid.sum())


def _golden_section(f, lo: float, hi: float, tol: float) -> tuple[float, bool]:
    """Deterministic golden-section minimizer; flags convergence to a bound."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    at_bound = min(x - lo, hi - x) < 10.0 * tol
    return x, at_bound


def fit_global_temperature(
    val: list[tuple[LogitVolume, LabelMap]],
) -> GlobalTemperature:
    """Minimize mean validation NLL over log T in [log 0.05, log 20]."""
    if not val:
        raise CalibrationError("empty validation set")
    flat_logits = []
    flat_true = []
    for logits, labels in val:
        valid = labels.valid_mask()
        if not valid.any():
            continue
        z = logits.values.astype(np.float64)[valid]
        flat_logits.append(z)
        flat_true.append(labels.labels[valid].astype(np.intp))
    if not flat_logits:
        raise CalibrationError("validation set has no non-ignored pixels")
    z = np.concatenate(flat_logits)
    y = np.concatenate(flat_true)
    if y.max() >= z.shape[1]:
        raise CalibrationError("label index exceeds class count")
    z_true = z[np.arange(z.shape[0]), y]

    def mean_nll(log_t: float) -> float:
        s = z / math.exp(log_t)
        m = s.max(axis=1)
        lse = m + np.log(np.exp(s - m[:, None]).sum(axis=1))
        return float((lse - z_true / math.exp(log_t)).mean())

    lo, hi = (math.log(t) for t in T_SEARCH_RANGE)
    log_t, at_bound = _golden_section(mean_nll, lo, hi, T_SEARCH_TOL)
    t = math.exp(log_t)
    if mean_nll(math.log(t)) > mean_nll(0.0):
        t, at_bound = 1.0, False  # never worse than the identity
    return GlobalTemperature(t, at_bound=at_bound)


def fit_local_temperature(
    val: list[tuple[RasterImage | np.ndarray, LogitVolume, LabelMap]],
    config: LtsTrainConfig = LtsTrainConfig(),
) -> tuple[LocalTemperature, list[float]]:
    """Train the temperature network on the validation split.

    Returns the fitted model and the per-epoch validation NLL history
    (index 0 is the identity-temperature initialization).
    """
    if not val:
        raise CalibrationError("empty validation set")
    prepared = []
    for image, logits, labels in val:
        stack = image_stack(image, logits)
        if (labels.height, labels.width) != (logits.height, logits.width):
            raise CalibrationError("label map and logits shapes disagree")
        prepared.append((stack, logits.values.astype(np.float64), labels.labels))
    channels = {p[0].shape[0] for p in prepared}
    if len(channels) != 1:
        raise CalibrationError("inconsistent channel counts across samples")
    params, history = temp_net.train(prepared, config=config, ignore_value=val[0][2].ignore_value)
    return LocalTemperature(params), history


@dataclass(frozen=True)
class ReliabilityBins:
    """Equal-width confidence bins over (0, 1]."""

    edges: np.ndarray  # (n_bins + 1,)
    mean_confidence: np.ndarray
    accuracy: np.ndarray
    counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.counts)


def reliability(
    probs: ProbabilityVolume,
    argmax: LabelMap,
    labels: LabelMap,
    n_bins: int = 10,
) -> ReliabilityBins:
    """Bucket pixels by confidence and compare to empirical accuracy."""
    if n_bins <= 0:
        raise CalibrationError("need at least one bin")
    conf = probs.values.max(axis=2)
    valid = labels.valid_mask()
    conf_v = conf[valid]
    correct_v = (argmax.labels == labels.labels)[valid]
    # (lo, hi] binning: confidence exactly at a bin's lower edge belongs below
    idx = np.clip(np.ceil(conf_v * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf_v, minlength=n_bins)
    correct_sum = np.bincount(idx, weights=correct_v.astype(np.float64), minlength=n_bins)
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), 0.0)
        accuracy = np.where(counts > 0, correct_sum / np.maximum(counts, 1), 0.0)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return ReliabilityBins(edges, mean_conf, accuracy, counts)


def expected_calibration_error(bins: ReliabilityBins) -> float:
    total = bins.counts.sum()
    if total == 0:
        return 0.0
    weights = bins.counts / total
    return float((weights * np.abs(bins.accuracy - bins.mean_confidence)).sum())


def save_reliability_csv(bins: ReliabilityBins, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "mean_conf", "accuracy", "count"])
        for b in range(bins.n_bins):
            writer.writerow(
                [
                    f"{bins.edges[b]:.6f}",
                    f"{bins.edges[b + 1]:.6f}",
                    f"{bins.mean_confidence[b]:.6f}",
                    f"{bins.accuracy[b]:.6f}",
                    int(bins.counts[b]),
                ]
            )


def save_temperature_model(model: TemperatureModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, GlobalTemperature):
        doc = {"variant": "global", "t": model.t, "at_bound": model.at_bound}
    else:
        doc = {
            "variant": "local",
            "uses_nir": model.uses_nir,
            "in_channels": model.params.in_channels,
            "hidden": model.params.hidden,
            "layers": {
                name: arr.tolist()
                for name, arr in zip(("w1", "b1", "w2", "b2", "w3", "b3"), model.params.arrays())
            },
        }
    path.write_text(json.dumps(doc, sort_keys=True))


def load_temperature_model(path: str | Path) -> TemperatureModel:
    doc = json.loads(Path(path).read_text())
    variant = doc.get("variant")
    if variant == "global":
        return GlobalTemperature(float(doc["t"]), at_bound=bool(doc.get("at_bound", False)))
    if variant == "local":
        layers = doc["layers"]
        params = TempNetParams(*(np.asarray(layers[k], dtype=np.float64) for k in ("w1", "b1", "w2", "b2", "w3", "b3")))
        return LocalTemperature(params, uses_nir=bool(doc.get("uses_nir", False)))
    raise CalibrationError(f"{path}: unknown temperature model variant {variant!r}")
