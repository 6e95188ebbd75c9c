import numpy as np
import pytest
from scipy.stats import chi2_contingency

from diffrefine.denoiser import MixtureOracle, MixturePrior
from diffrefine.errors import InvalidArgument
from diffrefine.heatmap import GridSize, argmax_points
from diffrefine.sampler import (
    InferencePlan,
    noise_streams,
    refine,
    refinement_sweep,
    sample_from_noise,
    trajectory_entropy,
)
from diffrefine.schedule import new_linear

G = GridSize(32, 32)
SCHED = new_linear()
MODES = [(0.25, 0.3), (0.75, 0.7)]


class Oracle:
    def __init__(self, prior):
        self.prior = prior

    def expand(self, n):
        return MixtureOracle.shared(self.prior, n, SCHED)


def oracle(weights=(0.5, 0.5), points=MODES):
    prior = MixturePrior.from_points(points, 2.0, G, weights)
    return prior, Oracle(prior)


@pytest.mark.parametrize("t_init,n,expected", [(250, 2, (250, 125, 0)), (500, 1, (500, 0)),
                                               (200, 5, (200, 160, 120, 80, 40, 0)), (3, 3, (3, 2, 1, 0))])
def test_plan_timesteps(t_init, n, expected):
    assert InferencePlan(t_init, n).timesteps == expected


@pytest.mark.parametrize("t_init,n", [(250, 0), (2, 3)])
def test_plan_rejects(t_init, n):
    with pytest.raises(InvalidArgument):
        InferencePlan(t_init, n)


def test_noise_streams_are_per_id():
    a = noise_streams(0, [5, 6, 7], (4, 4))
    b = noise_streams(0, [7, 5], (4, 4))
    np.testing.assert_array_equal(a[2], b[0])
    np.testing.assert_array_equal(a[0], b[1])
    assert not np.array_equal(noise_streams(1, [5], (4, 4))[0], a[0])


def test_sample_from_noise_deterministic_and_bounded():
    _, den = oracle()
    plan = InferencePlan(SCHED.T, 2)
    a = sample_from_noise(den.expand(8), 8, G.shape, plan, SCHED, seed=3)
    b = sample_from_noise(den.expand(8), 8, G.shape, plan, SCHED, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1 and np.all(np.isfinite(a))


def test_sample_from_noise_requires_T():
    _, den = oracle()
    with pytest.raises(InvalidArgument):
        sample_from_noise(den.expand(2), 2, G.shape, InferencePlan(400, 2), SCHED)


def test_single_mode_always_lands_on_it():
    prior, den = oracle((1.0,), [(0.4, 0.6)])
    out = sample_from_noise(den.expand(200), 200, G.shape, InferencePlan(SCHED.T, 2), SCHED, seed=0)
    d = np.abs(argmax_points(out) - argmax_points(prior.means)[0]) * 31
    assert np.all(d <= 1.0 + 1e-9)


def test_refine_outputs_in_unit_range():
    _, den = oracle()
    rng = np.random.default_rng(0)
    priors = rng.random((16, 32, 32)) * 5 - 2  # unscaled input is min-max scaled first
    out = refine(den.expand(16), priors, InferencePlan(250, 2), SCHED, seed=0)
    assert out.shape == priors.shape
    assert out.min() >= 0 and out.max() <= 1


def test_refine_single_heatmap_and_range_check():
    prior, den = oracle()
    out = refine(den.expand(1), prior.means[0], InferencePlan(50, 2), SCHED)
    assert out.shape == G.shape
    with pytest.raises(InvalidArgument):
        refine(den.expand(1), prior.means[0], InferencePlan(501, 2), SCHED)


def test_refine_at_T_matches_sampling_from_noise():
    # refine at t_init = T is a two-sample match with pure sampling (different noise streams)
    prior, den = oracle()
    n = 1000
    plan = InferencePlan(SCHED.T, 2)
    modes = argmax_points(prior.means)

    def which(out):
        d = np.linalg.norm(argmax_points(out)[:, None] - modes[None], axis=2)
        return np.argmin(d, axis=1)

    sampled = which(sample_from_noise(den.expand(n), n, G.shape, plan, SCHED, seed=11))
    refined = which(refine(den.expand(n), np.repeat(prior.means[:1], n, 0), plan, SCHED, seed=12))
    table = np.array([np.bincount(sampled, minlength=2), np.bincount(refined, minlength=2)])
    assert chi2_contingency(table).pvalue > 0.01


def test_entropy_non_increasing_along_plan():
    _, den = oracle()
    n = 300
    _, preds = sample_from_noise(den.expand(n), n, G.shape, InferencePlan(SCHED.T, 5), SCHED, seed=0,
                                 trajectory=True)
    ent = trajectory_entropy(preds)
    assert len(ent) == 5
    assert all(b <= a + 1e-9 for a, b in zip(ent, ent[1:]))


def test_sweep_single_scalar_and_contract():
    prior, den = oracle()
    curve = refinement_sweep(den.expand(1), prior.means[0], [100], SCHED, radius=2 / 31)
    assert len(curve.fraction) == 1 and 0 <= curve.fraction[0] <= 1
    with pytest.raises(InvalidArgument):
        refinement_sweep(den.expand(1), prior.means[0], [0, 100], SCHED, radius=0.1)
