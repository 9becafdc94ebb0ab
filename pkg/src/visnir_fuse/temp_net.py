"""Per-pixel temperature network with hand-written backpropagation.

Three 3x3 same-padding conv layers (tanh between, hidden width 16) map the
stacked image + logit channels to one channel, pushed through
``softplus(u) + 0.05`` so the temperature is strictly positive. The final
layer starts at zero weights with its bias solving softplus(b) + 0.05 = 1,
so an untrained network is the identity temperature.

Training minimizes the mean per-pixel negative log-likelihood of the true
class under softmax(z / T) with plain mini-batch gradient descent over
square patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

T_FLOOR = 0.05
_KERNEL = 3


class TempNetError(RuntimeError):
    pass


def softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class TempNetParams:
    """Weights of the temperature network; shapes fixed at fit time."""

    w1: np.ndarray  # (hidden, in_channels, 3, 3)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, hidden, 3, 3)
    b2: np.ndarray
    w3: np.ndarray  # (1, hidden, 3, 3)
    b3: np.ndarray

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "TempNetParams":
        out = []
        offset = 0
        for a in self.arrays():
            out.append(flat[offset : offset + a.size].reshape(a.shape).copy())
            offset += a.size
        if offset != flat.size:
            raise TempNetError("flat parameter vector has wrong length")
        return TempNetParams(*out)


def init_params(in_channels: int, hidden: int = 16, seed: int = 0) -> TempNetParams:
    rng = np.random.default_rng(seed)

    def he(shape):
        fan_in = shape[1] * _KERNEL * _KERNEL
        return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)

    b3 = np.log(np.expm1(1.0 - T_FLOOR))  # softplus(b3) + floor == 1
    return TempNetParams(
        w1=he((hidden, in_channels, _KERNEL, _KERNEL)),
        b1=np.zeros(hidden),
        w2=he((hidden, hidden, _KERNEL, _KERNEL)),
        b2=np.zeros(hidden),
        w3=np.zeros((1, hidden, _KERNEL, _KERNEL)),
        b3=np.array([b3]),
    )


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (_KERNEL, _KERNEL), axis=(1, 2))
    return np.einsum("oipq,ihwpq->ohw", w, win, optimize=True) + b[:, None, None]


def _conv3x3_grads(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (_KERNEL, _KERNEL), axis=(1, 2))
    dw = np.einsum("ohw,ihwpq->oipq", dout, win, optimize=True)
    db = dout.sum(axis=(1, 2))
    dp = np.pad(dout, ((0, 0), (1, 1), (1, 1)))
    dwin = sliding_window_view(dp, (_KERNEL, _KERNEL), axis=(1, 2))
    dx = np.einsum("oipq,ohwpq->ihw", w[:, :, ::-1, ::-1], dwin, optimize=True)
    return dw, db, dx


def forward(params: TempNetParams, x: np.ndarray, want_cache: bool = False):
    """Temperature map (H, W) for a (in_channels, H, W) input stack."""
    if x.ndim != 3 or x.shape[0] != params.in_channels:
        raise TempNetError(
            f"input stack must be ({params.in_channels}, H, W), got {x.shape}"
        )
    a1 = _conv3x3(x, params.w1, params.b1)
    h1 = np.tanh(a1)
    a2 = _conv3x3(h1, params.w2, params.b2)
    h2 = np.tanh(a2)
    u = _conv3x3(h2, params.w3, params.b3)[0]
    t = softplus(u) + T_FLOOR
    if not want_cache:
        return t
    return t, (x, h1, h2, u)


def nll_and_grad(
    params: TempNetParams,
    x: np.ndarray,
    logits: np.ndarray,
    labels: np.ndarray,
    ignore_value: int = 255,
):
    """Mean NLL of softmax(z / T) at the true labels, with parameter grads."""
    t, (x, h1, h2, u) = forward(params, x, want_cache=True)
    valid = labels != ignore_value
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise TempNetError("all pixels ignored")

    z = logits.astype(np.float64)
    s = z / t[:, :, None]
    m = s.max(axis=2)
    ex = np.exp(s - m[:, :, None])
    sum_ex = ex.sum(axis=2)
    lse = m + np.log(sum_ex)
    p = ex / sum_ex[:, :, None]
    safe_labels = np.where(valid, labels, 0).astype(np.intp)
    z_true = np.take_along_axis(z, safe_labels[:, :, None], axis=2)[:, :, 0]
    s_true = z_true / t
    loss = float(np.where(valid, lse - s_true, 0.0).sum() / n_valid)

    # d loss / dT = (z_y - sum_k p_k z_k) / T^2 per valid pixel
    dt = (z_true - (p * z).sum(axis=2)) / (t * t)
    dt = np.where(valid, dt, 0.0) / n_valid
    du = dt * _sigmoid(u)

    dw3, db3, dh2 = _conv3x3_grads(h2, params.w3, du[None, :, :])
    da2 = dh2 * (1.0 - h2 * h2)
    dw2, db2, dh1 = _conv3x3_grads(h1, params.w2, da2)
    da1 = dh1 * (1.0 - h1 * h1)
    dw1, db1, _ = _conv3x3_grads(x, params.w1, da1)

    grads = TempNetParams(dw1, db1, dw2, db2, dw3, db3)
    return loss, grads


def evaluate_nll(
    params: TempNetParams,
    samples,
    ignore_value: int = 255,
) -> float:
    """Pixel-weighted mean NLL over (stack, logits, labels) samples."""
    total, count = 0.0, 0
    for x, logits, labels in samples:
        t = forward(params, x)
        valid = labels != ignore_value
        if not valid.any():
            continue
        z = logits.astype(np.float64)
        s = z / t[:, :, None]
        m = s.max(axis=2)
        lse = m + np.log(np.exp(s - m[:, :, None]).sum(axis=2))
        safe_labels = np.where(valid, labels, 0).astype(np.intp)
        s_true = np.take_along_axis(s, safe_labels[:, :, None], axis=2)[:, :, 0]
        total += float(np.where(valid, lse - s_true, 0.0).sum())
        count += int(valid.sum())
    if count == 0:
        raise TempNetError("no valid pixels in evaluation set")
    return total / count


@dataclass(frozen=True)
class LtsTrainConfig:
    learning_rate: float = 1e-3
    patch: int = 64
    max_epochs: int = 100
    patience: int = 5
    min_improvement: float = 1e-5
    hidden: int = 16
    seed: int = 0


def _patches(shape: tuple[int, int], patch: int):
    h, w = shape
    for y0 in range(0, h, patch):
        for x0 in range(0, w, patch):
            yield slice(y0, min(y0 + patch, h)), slice(x0, min(x0 + patch, w))


def train(
    samples,
    config: LtsTrainConfig = LtsTrainConfig(),
    ignore_value: int = 255,
):
    """Fit the temperature network on (stack, logits, labels) samples.

    Returns (params, history) where params achieve validation NLL no worse
    than the identity-temperature initialization. Divergence (non-finite
    loss) stops training and returns the best checkpoint so far.
    """
    if not samples:
        raise TempNetError("empty training set")
    in_channels = samples[0][0].shape[0]
    params = init_params(in_channels, hidden=config.hidden, seed=config.seed)
    best_params = params
    best_nll = evaluate_nll(params, samples, ignore_value)
    history = [best_nll]

    batches = []
    for idx, (x, _, _) in enumerate(samples):
        for view in _patches(x.shape[1:], config.patch):
            batches.append((idx, view))

    rng = np.random.default_rng(config.seed)
    stall = 0
    for _ in range(config.max_epochs):
        order = rng.permutation(len(batches))
        diverged = False
        for b in order:
            idx, (ys, xs) = batches[b]
            x, logits, labels = samples[idx]
            patch_labels = labels[ys, xs]
            if not (patch_labels != ignore_value).any():
                continue
            loss, grads = nll_and_grad(
                params, x[:, ys, xs], logits[ys, xs], patch_labels, ignore_value
            )
            if not np.isfinite(loss):
                diverged = True
                break
            stepped = [
                a - config.learning_rate * g
                for a, g in zip(params.arrays(), grads.arrays())
            ]
            params = TempNetParams(*stepped)
        if diverged:
            break
        epoch_nll = evaluate_nll(params, samples, ignore_value)
        if not np.isfinite(epoch_nll):
            break
        history.append(epoch_nll)
        if epoch_nll < best_nll - config.min_improvement:
            best_nll = epoch_nll
            best_params = params
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    return best_params, history
