"""Conditional x0-predictors: a small U-Net and a closed-form Gaussian-mixture oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp
from torch import nn

from . import engine
from .errors import InvalidArgument, NumericalFailure
from .heatmap import GridSize, render_gaussians
from .schedule import NoiseSchedule

N_CONDITION_CHANNELS = 4  # head mask, gaze dx, gaze dy, saliency


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``(batch, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Block(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int = 0):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout) if time_dim else None

    def forward(self, x, temb=None):
        x = self.conv(x)
        if self.time is not None:
            x = x + self.time(temb)[:, :, None, None]
        return F.silu(x)


class UNet(nn.Module):
    """Two down-levels, a bottleneck and two up-levels with skip concatenation.

    With ``time_dim > 0`` a sinusoidal timestep embedding is projected and
    added at every level; with ``time_dim == 0`` the net is a plain
    conditional regressor.
    """

    def __init__(self, in_channels: int, base: int = 16, time_dim: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.base = base
        self.time_dim = time_dim
        c1, c2 = base, 2 * base
        if time_dim:
            self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU())
        self.inc = Block(in_channels, c1, time_dim)
        self.down1 = Block(c1, c2, time_dim)
        self.down2 = Block(c2, c2, time_dim)
        self.mid = Block(c2, c2, time_dim)
        self.up2 = Block(c2 + c2, c2, time_dim)
        self.up1 = Block(c2 + c1, c1, time_dim)
        self.out = nn.Conv2d(c1, 1, 3, padding=1)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "base": self.base, "time_dim": self.time_dim}

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise InvalidArgument(f"grid {tuple(x.shape[-2:])} must be divisible by 4")
        temb = None
        if self.time_dim:
            temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        a = self.inc(x, temb)
        b = self.down1(F.avg_pool2d(a, 2), temb)
        c = self.down2(F.avg_pool2d(b, 2), temb)
        c = self.mid(c, temb)
        u = self.up2(torch.cat([F.interpolate(c, scale_factor=2, mode="nearest"), b], 1), temb)
        u = self.up1(torch.cat([F.interpolate(u, scale_factor=2, mode="nearest"), a], 1), temb)
        return self.out(u)[:, 0]


def build_unet(config: dict, seed: int) -> UNet:
    with engine.seeded(seed):
        return UNet(**config)


class NetDenoiser:
    """Wraps a trained U-Net as ``predict_h0(h_t, t, cond)`` over numpy batches."""

    def __init__(self, net: UNet, chunk: int = 256):
        self.net = net.eval()
        self.chunk = chunk

    def predict_h0(self, h_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        h_t = np.asarray(h_t, dtype=np.float32)
        cond = np.asarray(cond, dtype=np.float32)
        if h_t.ndim == 2:
            return self.predict_h0(h_t[None], t, cond[None])[0]
        if h_t.shape[0] != cond.shape[0] or h_t.shape[1:] != cond.shape[2:]:
            raise InvalidArgument(f"size mismatch: h_t {h_t.shape}, condition {cond.shape}")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (h_t.shape[0],)).copy()
        out = np.empty_like(h_t)
        with torch.no_grad():
            for s in range(0, len(h_t), self.chunk):
                sl = slice(s, s + self.chunk)
                x = torch.from_numpy(np.concatenate([h_t[sl, None], cond[sl]], axis=1))
                out[sl] = self.net(x, torch.from_numpy(t_arr[sl])).numpy()
        return np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0)

    def bind(self, cond: np.ndarray) -> Callable[[np.ndarray, int], np.ndarray]:
        return lambda h_t, t: self.predict_h0(h_t, t, cond)


def x0_loss(pred, target):
    """Mean squared error over pixels (numpy or torch)."""
    if isinstance(pred, torch.Tensor):
        return engine.mse_loss(pred, target)
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


# ------------------------------------------------------------------ mixtures

@dataclass
class MixturePrior:
    means: np.ndarray  # (K, H, W)
    weights: np.ndarray  # (K,)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means.ndim != 3 or len(self.weights) != len(self.means) or len(self.weights) == 0:
            raise InvalidArgument("need K >= 1 component maps and K weights")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise InvalidArgument(f"weights must be positive and sum to 1, got {self.weights}")

    @classmethod
    def from_points(cls, points, sigma: float, size: GridSize, weights=None) -> "MixturePrior":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if weights is None:
            weights = np.full(len(points), 1.0 / len(points))
        return cls(render_gaussians(points, sigma, size), weights)

    def to_records(self, points, sigma: float) -> list[dict]:
        return [{"x": float(p[0]), "y": float(p[1]), "sigma": float(sigma), "weight": float(w)}
                for p, w in zip(np.asarray(points).reshape(-1, 2), self.weights)]


def mixture_log_posterior(h_t: np.ndarray, t: int, means: np.ndarray, log_w: np.ndarray,
                          schedule: NoiseSchedule) -> np.ndarray:
    """Normalized log posterior over components for a batch ``(B, H, W)``.

    ``means`` is ``(K, H, W)`` shared or ``(B, K, H, W)`` per sample; ``log_w``
    matches its leading dims. Components with ``-inf`` log weight are padding.
    """
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise InvalidArgument(f"timestep {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar[t]
    h = np.asarray(h_t, dtype=np.float64).reshape(len(h_t), -1)
    if means.ndim == 3:
        mu = means.reshape(len(means), -1)
        sq = ((h[:, None, :] - math.sqrt(ab) * mu[None]) ** 2).sum(-1)
        lw = np.broadcast_to(log_w, sq.shape)
    else:
        mu = means.reshape(means.shape[0], means.shape[1], -1)
        sq = ((h[:, None, :] - math.sqrt(ab) * mu) ** 2).sum(-1)
        lw = log_w
    logits = lw - sq / (2.0 * (1.0 - ab))
    return logits - logsumexp(logits, axis=1, keepdims=True)


def analytic_predict_h0(h_t: np.ndarray, t: int, prior: MixturePrior, schedule: NoiseSchedule) -> np.ndarray:
    """Exact posterior mean E[h0 | h_t] when h0 is drawn from a finite mixture of maps."""
    single = np.ndim(h_t) == 2
    h = np.asarray(h_t)[None] if single else np.asarray(h_t)
    post = np.exp(mixture_log_posterior(h, t, prior.means, np.log(prior.weights), schedule))
    out = np.einsum("bk,khw->bhw", post, prior.means)
    return out[0] if single else out


class MixtureOracle:
    """Per-sample mixture oracle with the ``fn(h_t, t)`` calling convention of the sampler.

    ``means`` is ``(B, K, H, W)`` and ``weights`` ``(B, K)``; zero weights mark
    padding components.
    """

    def __init__(self, means: np.ndarray, weights: np.ndarray, schedule: NoiseSchedule):
        self.means = np.asarray(means, dtype=np.float64)
        w = np.asarray(weights, dtype=np.float64)
        with np.errstate(divide="ignore"):
            self.log_w = np.log(w / w.sum(axis=1, keepdims=True))
        self.schedule = schedule

    @classmethod
    def shared(cls, prior: MixturePrior, batch: int, schedule: NoiseSchedule) -> "MixtureOracle":
        return cls(np.broadcast_to(prior.means, (batch,) + prior.means.shape),
                   np.broadcast_to(prior.weights, (batch, len(prior.weights))), schedule)

    def posterior(self, h_t, t) -> np.ndarray:
        return np.exp(mixture_log_posterior(h_t, t, self.means, self.log_w, self.schedule))

    def __call__(self, h_t, t) -> np.ndarray:
        post = self.posterior(h_t, t)
        return np.einsum("bk,bkhw->bhw", post, self.means).astype(np.float32)


# ------------------------------------------------------------------ training

@dataclass
class DenoiserConfig:
    base: int = 16
    time_dim: int = 32
    lr: float = 2e-3
    batch_size: int = 32
    steps: int = 1500


def train_denoiser(h0: np.ndarray, cond: np.ndarray, schedule: NoiseSchedule, config: DenoiserConfig,
                   seed: int, *, extra_loss=None, after_step=None, net: UNet | None = None):
    """x0-parameterized diffusion training on labeled heatmaps.

    Each step draws a batch, ``t ~ U[1, T]`` and ``eps ~ N(0, I)``, corrupts
    ``h0`` in closed form and minimizes pixel MSE of the predicted ``h0``.
    ``extra_loss(net, step)`` and ``after_step(net, step)`` are hooks used by
    the mean-teacher variant; they must draw from their own RNG streams.

    Returns ``(net, loss_trace)``.
    """
    h0 = np.asarray(h0, dtype=np.float32)
    cond = np.asarray(cond, dtype=np.float32)
    if len(h0) == 0:
        raise InvalidArgument("cannot train a denoiser on an empty labeled set")
    if net is None:
        net = build_unet({"in_channels": 1 + cond.shape[1], "base": config.base,
                          "time_dim": config.time_dim}, seed)
    net.train()
    opt = engine.make_optimizer(net.parameters(), config.lr)
    rng = np.random.default_rng([seed, 1])
    trace = []
    for step in range(config.steps):
        idx = rng.integers(0, len(h0), size=min(config.batch_size, len(h0)))
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        noise = rng.standard_normal(h0[idx].shape).astype(np.float32)
        h_t = schedule.forward_sample(h0[idx], t, noise)
        x = torch.from_numpy(np.concatenate([h_t[:, None], cond[idx]], axis=1))
        pred = net(x, torch.from_numpy(t))
        loss = x0_loss(pred, torch.from_numpy(h0[idx]))
        total = loss if extra_loss is None else loss + extra_loss(net, step)
        if not torch.isfinite(total):
            raise NumericalFailure(f"non-finite denoiser loss at step {step}: {total.item()}")
        opt.zero_grad()
        total.backward()
        opt.step()
        trace.append(loss.item())
        if after_step is not None:
            after_step(net, step)
    net.eval()
    return net, trace


def evaluate_x0_loss(net: UNet, h0: np.ndarray, cond: np.ndarray, schedule: NoiseSchedule,
                     seed: int, draws: int = 1) -> float:
    """Average x0 loss with fresh ``t`` and noise draws (the training objective)."""
    rng = np.random.default_rng([seed, 7])
    den = NetDenoiser(net)
    losses = []
    for _ in range(draws):
        t = rng.integers(1, schedule.T + 1, size=len(h0))
        noise = rng.standard_normal(h0.shape).astype(np.float32)
        h_t = schedule.forward_sample(h0, t, noise)
        losses.append(np.mean((den.predict_h0(h_t, t, cond) - h0) ** 2))
    return float(np.mean(losses))
