import numpy as np
import pytest

from visnir_fuse.temp_net import (
    LtsTrainConfig,
    TempNetError,
    forward,
    init_params,
    nll_and_grad,
    softplus,
    train,
)


def rel_error(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


class TestForward:
    def test_initial_temperature_is_one(self):
        params = init_params(in_channels=5, seed=0)
        x = np.random.default_rng(1).uniform(size=(5, 6, 6))
        t = forward(params, x)
        np.testing.assert_allclose(t, 1.0, atol=1e-12)

    def test_output_always_above_floor(self):
        params = init_params(in_channels=3, seed=2)
        flat = params.flat()
        params = params.with_flat(np.random.default_rng(3).normal(0, 2, flat.shape))
        x = np.random.default_rng(4).normal(0, 5, size=(3, 8, 8))
        t = forward(params, x)
        # softplus may underflow to 0 exactly; the additive floor keeps T positive
        assert t.min() >= 0.05
        assert t.min() > 0.0

    def test_shape_mismatch_rejected(self):
        params = init_params(in_channels=3)
        with pytest.raises(TempNetError):
            forward(params, np.zeros((4, 6, 6)))


class TestGradientCheck:
    def test_analytic_matches_central_differences(self):
        # random (non-initialization) parameter point on a 4x4 instance
        k, img_channels = 3, 3
        in_channels = img_channels + k
        params = init_params(in_channels, seed=10)
        rng = np.random.default_rng(11)
        params = params.with_flat(rng.normal(0.0, 0.4, params.flat().shape))
        x = rng.uniform(0, 1, size=(in_channels, 4, 4))
        logits = rng.normal(0, 2, size=(4, 4, k))
        labels = rng.integers(0, k, size=(4, 4)).astype(np.uint8)
        labels[0, 0] = 255  # one ignored pixel on the path

        _, grads = nll_and_grad(params, x, logits, labels)
        analytic = grads.flat()

        eps = 1e-4
        flat = params.flat()
        worst = 0.0
        for i in range(flat.size):
            up = flat.copy()
            up[i] += eps
            down = flat.copy()
            down[i] -= eps
            f_up, _ = nll_and_grad(params.with_flat(up), x, logits, labels)
            f_down, _ = nll_and_grad(params.with_flat(down), x, logits, labels)
            numeric = (f_up - f_down) / (2 * eps)
            worst = max(worst, rel_error(analytic[i], numeric))
        assert worst < 1e-3, f"worst relative gradient error {worst:.2e}"

    def test_all_ignored_rejected(self):
        params = init_params(4)
        with pytest.raises(TempNetError, match="ignored"):
            nll_and_grad(
                params,
                np.zeros((4, 2, 2)),
                np.zeros((2, 2, 2)),
                np.full((2, 2), 255, np.uint8),
            )


class TestTraining:
    def test_best_checkpoint_never_worse_than_init(self):
        rng = np.random.default_rng(5)
        samples = []
        for _ in range(2):
            x = rng.uniform(size=(4, 12, 12))
            logits = rng.normal(0, 3, size=(12, 12, 2))
            labels = rng.integers(0, 2, size=(12, 12)).astype(np.uint8)
            samples.append((x, logits, labels))
        from visnir_fuse.temp_net import evaluate_nll

        cfg = LtsTrainConfig(learning_rate=0.05, max_epochs=8, patch=8, seed=0)
        params, history = train(samples, cfg)
        assert evaluate_nll(params, samples) <= history[0] + 1e-12

    def test_divergence_returns_last_finite(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(2, 8, 8))
        logits = rng.normal(0, 4, size=(8, 8, 3))
        labels = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
        cfg = LtsTrainConfig(learning_rate=1e6, max_epochs=5, patch=8, seed=0)
        params, history = train([(x, logits, labels)], cfg)
        assert np.isfinite(params.flat()).all()
        assert np.isfinite(history).all()


class TestSoftplus:
    def test_matches_reference(self):
        x = np.array([-800.0, -5.0, 0.0, 5.0, 800.0])
        out = softplus(x)
        assert out[0] == 0.0 and out[4] == 800.0
        np.testing.assert_allclose(out[1:4], np.log1p(np.exp(x[1:4])), atol=1e-12)
