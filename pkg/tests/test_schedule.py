import math

import numpy as np
import pytest

from diffrefine.errors import InvalidArgument
from diffrefine.heatmap import GridSize, render_gaussian
from diffrefine.schedule import NoiseSchedule, new_linear

# product of (1 - beta) for the default T-scaled linear range, computed once and frozen
ALPHA_BAR_T_DEFAULT = 3.766093264e-05
# same for the unscaled [1e-4, 0.02] range at T = 500
ALPHA_BAR_T_UNSCALED = 0.006352710797015061


def test_first_step_unscaled_range():
    s = new_linear(500, 1e-4, 0.02)
    assert s.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bar[500] == pytest.approx(ALPHA_BAR_T_UNSCALED, rel=1e-12)
    # the h0 coefficient at T is sqrt(alpha_bar_T); only the variance-side bound < 0.05 holds here
    assert s.alpha_bar[500] < 0.05


def test_default_schedule_regression():
    s = new_linear()
    assert s.T == 500
    assert s.beta[1] == pytest.approx(2e-4) and s.beta[500] == pytest.approx(0.04)
    assert s.alpha_bar[500] == pytest.approx(ALPHA_BAR_T_DEFAULT, rel=1e-6)
    assert math.sqrt(s.alpha_bar[500]) < 0.05


def test_alpha_bar_product_oracle():
    s = new_linear(500, 1e-4, 0.02)
    prod = 1.0
    for t in range(1, 501):
        prod *= 1 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 499)
        assert s.alpha_bar[t] == pytest.approx(prod, rel=1e-12)


@pytest.mark.parametrize("args", [(500, 1e-4, 0.02), (10, 0.001, 0.2), (1000, 1e-5, 0.5), (2, 0.1, 0.2)])
def test_schedule_invariants(args):
    s = NoiseSchedule.linear(*args)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(np.diff(s.beta[1:]) > 0)
    assert np.all((s.alpha[1:] > 0) & (s.alpha[1:] < 1))


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (500, 0.02, 1e-4), (500, 0.0, 0.02), (500, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(InvalidArgument):
        NoiseSchedule.linear(*args)


def test_forward_sample_zero_noise():
    s = new_linear()
    h0 = render_gaussian((0.4, 0.6), 3.0, GridSize())
    out = s.forward_sample(h0, 100, np.zeros_like(h0))
    np.testing.assert_array_equal(out, np.float32(math.sqrt(s.alpha_bar[100])) * h0)
    assert out.dtype == np.float32


def test_forward_sample_at_T_is_mostly_noise():
    s = new_linear()
    h0 = np.ones((4, 4))
    noise = np.random.default_rng(0).standard_normal((4, 4))
    out = s.forward_sample(h0, s.T, noise)
    np.testing.assert_allclose(out - noise * math.sqrt(1 - s.alpha_bar[s.T]), math.sqrt(s.alpha_bar[s.T]))
    assert math.sqrt(s.alpha_bar[s.T]) < 0.05


def test_forward_size_mismatch():
    s = new_linear()
    with pytest.raises(InvalidArgument):
        s.forward_sample(np.zeros((4, 4)), 3, np.zeros((4, 5)))


@pytest.mark.parametrize("t", [0, 501, -1])
def test_forward_step_range(t):
    s = new_linear()
    with pytest.raises(InvalidArgument):
        s.forward_step(np.zeros((2, 2)), t, np.zeros((2, 2)))


def test_forward_step_zero_noise():
    s = new_linear(500, 1e-4, 0.02)
    h = np.full((3, 3), 2.0)
    np.testing.assert_allclose(s.forward_step(h, 1, np.zeros_like(h)), 2.0 * math.sqrt(0.9999))


def test_batched_timesteps():
    s = new_linear()
    h0 = np.ones((3, 2, 2), dtype=np.float32)
    t = np.array([1, 100, 500])
    out = s.forward_sample(h0, t, np.zeros_like(h0))
    np.testing.assert_allclose(out[:, 0, 0], np.sqrt(s.alpha_bar[t]), rtol=1e-6)


def test_ddim_terminal_step_returns_prediction():
    s = new_linear()
    rng = np.random.default_rng(0)
    h_t, h0_hat = rng.standard_normal((2, 8, 8))
    np.testing.assert_array_equal(s.ddim_prev(h_t, h0_hat, 300, 0), h0_hat)


def test_ddim_exact_with_true_prediction():
    s = new_linear()
    rng = np.random.default_rng(1)
    h0 = render_gaussian((0.3, 0.7), 3.0, GridSize()).astype(np.float64)
    eps = rng.standard_normal(h0.shape)
    for t, t_prev in [(500, 250), (250, 125), (100, 1), (7, 6)]:
        h_t = s.forward_sample(h0, t, eps)
        out = s.ddim_prev(h_t, h0, t, t_prev)
        np.testing.assert_allclose(out, s.forward_sample(h0, t_prev, eps), atol=1e-6, rtol=0)


def test_ddim_zero_residual():
    s = new_linear()
    h0 = np.random.default_rng(2).random((5, 5))
    out = s.ddim_prev(math.sqrt(s.alpha_bar[200]) * h0, h0, 200, 50)
    np.testing.assert_allclose(out, math.sqrt(s.alpha_bar[50]) * h0, atol=1e-12)


@pytest.mark.parametrize("t,t_prev", [(100, 100), (100, 200)])
def test_ddim_rejects_non_decreasing(t, t_prev):
    s = new_linear()
    with pytest.raises(InvalidArgument):
        s.ddim_prev(np.zeros((2, 2)), np.zeros((2, 2)), t, t_prev)
