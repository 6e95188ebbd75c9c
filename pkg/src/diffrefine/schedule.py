"""Linear noise schedule, forward corruption and the deterministic DDIM transition."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step coefficients indexed by timestep.

    Arrays have length ``T + 1``; index 0 is the clean-data step with
    ``alpha_bar[0] == 1`` and ``beta[0] == 0``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def linear(cls, T: int = 500, beta_start: float | None = None, beta_end: float | None = None) -> "NoiseSchedule":
        """Linearly spaced betas. Unspecified endpoints default to ``[1e-4, 0.02] * 1000 / T``,
        which keeps the total noise of the usual 1000-step range at any ``T``.
        """
        if T < 2:
            raise InvalidArgument(f"T must be >= 2, got {T}")
        scale = 1000.0 / T
        beta_end = min(0.02 * scale, 0.999) if beta_end is None else beta_end
        beta_start = min(1e-4 * scale, beta_end / 2) if beta_start is None else beta_start
        if not (0 < beta_start < beta_end < 1):
            raise InvalidArgument(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
        beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        return cls(beta, alpha, alpha_bar)

    def _check_t(self, t, lo: int = 1):
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            if np.any(t_arr != np.round(t_arr)):
                raise InvalidArgument(f"timestep must be integral, got {t}")
            t_arr = t_arr.astype(np.int64)
        if np.any(t_arr < lo) or np.any(t_arr > self.T):
            raise InvalidArgument(f"timestep {t} outside [{lo}, {self.T}]")
        return t_arr

    def forward_sample(self, h0, t, noise):
        """Draw ``h_t`` given ``h0`` in closed form."""
        return _combine(self.alpha_bar, self._check_t(t), h0, noise)

    def forward_step(self, h_prev, t, noise):
        """One Markov corruption step from ``h_{t-1}`` to ``h_t``."""
        return _combine(self.alpha, self._check_t(t), h_prev, noise)

    def ddim_prev(self, h_t, h0_hat, t, t_prev):
        """Deterministic (eta = 0) DDIM jump from ``t`` to ``t_prev``."""
        t = self._check_t(t)
        t_prev = self._check_t(t_prev, lo=0)
        if np.any(t_prev >= t):
            raise InvalidArgument(f"t_prev ({t_prev}) must be < t ({t})")
        h_t = np.asarray(h_t)
        h0_hat = np.asarray(h0_hat)
        if h_t.shape != h0_hat.shape:
            raise InvalidArgument(f"shape mismatch {h_t.shape} vs {h0_hat.shape}")
        if np.all(t_prev == 0):
            return h0_hat.copy()
        s_t, n_t = _coef(self.alpha_bar, t, h_t)
        s_prev, n_prev = _coef(self.alpha_bar, t_prev, h_t)
        eps_hat = (h_t - s_t * h0_hat) / n_t
        return s_prev * h0_hat + n_prev * eps_hat


def new_linear(T: int = 500, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    return NoiseSchedule.linear(T, beta_start, beta_end)


def _coef(table: np.ndarray, t: np.ndarray, like: np.ndarray):
    """Return ``(sqrt(a), sqrt(1 - a))`` for ``a = table[t]``, broadcastable against ``like``."""
    if t.ndim == 0:
        a = float(table[int(t)])
        # python floats keep float32 payloads in float32
        return math.sqrt(a), math.sqrt(1.0 - a)
    dtype = like.dtype if np.issubdtype(like.dtype, np.floating) else np.float64
    a = table[t].reshape(t.shape + (1,) * (like.ndim - t.ndim))
    return np.sqrt(a).astype(dtype), np.sqrt(1.0 - a).astype(dtype)


def _combine(table, t, signal, noise):
    signal = np.asarray(signal)
    noise = np.asarray(noise)
    if signal.shape != noise.shape:
        raise InvalidArgument(f"shape mismatch {signal.shape} vs noise {noise.shape}")
    keep, mix = _coef(table, t, signal)
    return keep * signal + mix * noise
