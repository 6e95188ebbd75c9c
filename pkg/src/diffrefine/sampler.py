"""Reverse-process generation and prior refinement with deterministic DDIM steps.

A denoiser here is any callable ``fn(h_t, t) -> h0_hat`` over ``(B, H, W)``
batches, already bound to its per-sample conditions (see
``NetDenoiser.bind`` and ``MixtureOracle``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .heatmap import argmax_points, entropy, minmax_scale
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class InferencePlan:
    t_init: int
    n_steps: int = 2
    timesteps: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidArgument(f"n_steps must be >= 1, got {self.n_steps}")
        if self.t_init < self.n_steps:
            raise InvalidArgument(f"t_init={self.t_init} too small for {self.n_steps} distinct steps")
        ts = tuple(int(round(v)) for v in np.linspace(self.t_init, 0, self.n_steps + 1))
        object.__setattr__(self, "timesteps", ts)


def noise_streams(seed: int, ids, shape) -> np.ndarray:
    """Standard-normal draws, one independent stream per sample id."""
    out = np.empty((len(ids),) + tuple(shape), dtype=np.float32)
    for i, sid in enumerate(ids):
        out[i] = np.random.default_rng([int(seed), int(sid)]).standard_normal(shape, dtype=np.float32)
    return out


def run_plan(denoise, h, plan: InferencePlan, schedule: NoiseSchedule, trajectory: bool = False):
    """Iterate predict / DDIM-jump along ``plan.timesteps`` starting from state ``h``."""
    ts = plan.timesteps
    preds = []
    h0_hat = None
    for t, t_prev in zip(ts[:-1], ts[1:]):
        h0_hat = np.asarray(denoise(h, t), dtype=h.dtype)
        if trajectory:
            preds.append(h0_hat.copy())
        if t_prev > 0:
            h = schedule.ddim_prev(h, h0_hat, t, t_prev)
    out = np.clip(h0_hat, 0.0, 1.0)
    return (out, preds) if trajectory else out


def sample_from_noise(denoise, n: int, shape, plan: InferencePlan, schedule: NoiseSchedule,
                      seed: int = 0, ids=None, trajectory: bool = False):
    """Generate ``n`` heatmaps from pure noise at ``plan.t_init`` (normally ``T``)."""
    if plan.t_init != schedule.T:
        raise InvalidArgument(f"sampling from noise needs t_init = T = {schedule.T}, got {plan.t_init}")
    ids = range(n) if ids is None else ids
    h = noise_streams(seed, ids, shape)
    return run_plan(denoise, h, plan, schedule, trajectory)


def refine(denoise, priors: np.ndarray, plan: InferencePlan, schedule: NoiseSchedule,
           seed: int = 0, ids=None, trajectory: bool = False):
    """Noise each prior to ``plan.t_init`` and denoise along the plan.

    Priors are min-max scaled to [0, 1] first so their magnitude matches the
    training heatmaps.
    """
    priors = np.asarray(priors, dtype=np.float32)
    single = priors.ndim == 2
    if single:
        priors = priors[None]
    if not 1 <= plan.t_init <= schedule.T:
        raise InvalidArgument(f"t_init {plan.t_init} outside [1, {schedule.T}]")
    scaled = np.stack([minmax_scale(p) for p in priors])
    ids = range(len(priors)) if ids is None else ids
    noise = noise_streams(seed, ids, priors.shape[1:])
    h = schedule.forward_sample(scaled, plan.t_init, noise)
    result = run_plan(denoise, h, plan, schedule, trajectory)
    if single:
        return (result[0][0], [p[0] for p in result[1]]) if trajectory else result[0]
    return result


@dataclass
class FaithfulnessCurve:
    t_inits: list[int]
    fraction: list[float]
    stderr: list[float]

    def rows(self):
        return list(zip(self.t_inits, self.fraction, self.stderr))


def refinement_sweep(denoise, priors: np.ndarray, t_inits, schedule: NoiseSchedule, *,
                     radius: float, n_steps: int = 2, seed: int = 0) -> FaithfulnessCurve:
    """Fraction of refined outputs whose peak stays within ``radius`` of the prior's peak.

    ``radius`` is in normalized units. The same noise streams are reused at
    every ``t_init`` so the curve compares like with like.
    """
    priors = np.asarray(priors, dtype=np.float32)
    if priors.ndim == 2:
        priors = priors[None]
    t_inits = list(t_inits)
    if not t_inits or len(priors) == 0:
        raise InvalidArgument("need at least one prior and one t_init")
    if any(t < 1 for t in t_inits):
        raise InvalidArgument("t_init must be >= 1")
    prior_peaks = argmax_points(priors)
    fracs, ses = [], []
    for t in t_inits:
        out = refine(denoise, priors, InferencePlan(t, n_steps), schedule, seed=seed)
        d = np.linalg.norm(argmax_points(out) - prior_peaks, axis=1)
        hit = (d <= radius).astype(np.float64)
        fracs.append(float(hit.mean()))
        ses.append(float(hit.std(ddof=1) / np.sqrt(len(hit))) if len(hit) > 1 else 0.0)
    return FaithfulnessCurve(t_inits, fracs, ses)


def trajectory_entropy(preds: list[np.ndarray]) -> list[float]:
    """Mean entropy of the normalized predicted h0 at each step of a trajectory."""
    return [float(np.mean([entropy(h) for h in step])) for step in preds]
