# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Noise schedule and the mixture oracle
#
# The denoiser predicts the clean heatmap directly. Before training anything we
# can check the sampler against a denoiser whose answer is known in closed form:
# the posterior mean of a Gaussian mixture over heatmaps.

# %%
from __future__ import annotations

import numpy as np

from diffrefine.denoiser import MixtureOracle, MixturePrior
from diffrefine.heatmap import GridSize, argmax_points
from diffrefine.sampler import InferencePlan, sample_from_noise
from diffrefine.schedule import new_linear

sched = new_linear()
print("T =", sched.T, " beta range", sched.beta[1], sched.beta[-1])
print("alpha_bar at 50/250/500:", sched.alpha_bar[[50, 250, 500]].round(4))

# %% [markdown]
# ## Signal that survives the forward process
#
# A unit-height Gaussian of width sigma pixels carries energy close to
# pi * sigma^2. After corruption to step t its signal-to-noise ratio is
# alpha_bar / (1 - alpha_bar) times that energy, which is why the default
# refinement step depends on the heatmap sigma.

# %%
for sigma in (1.0, 2.0, 3.0):
    snr = sched.alpha_bar[1:] / (1 - sched.alpha_bar[1:]) * np.pi * sigma ** 2
    print(f"sigma {sigma}: SNR at t=100 {snr[99]:.2f}, t=250 {snr[249]:.2f}")

# %% [markdown]
# ## Sampling from noise with the oracle
#
# Two equally weighted modes should be reached about equally often.

# %%
size = GridSize(32, 32)
prior = MixturePrior.from_points([(0.25, 0.3), (0.75, 0.7)], 2.0, size, (0.5, 0.5))
n = 1000
out = sample_from_noise(MixtureOracle.shared(prior, n, sched), n, size.shape, InferencePlan(sched.T, 2), sched)
modes = argmax_points(prior.means)
d = np.linalg.norm(argmax_points(out)[:, None] - modes[None], axis=2)
print("share at mode 0:", np.mean(d.argmin(1) == 0))
print("within 2 px of a mode:", np.mean(d.min(1) * 31 <= 2))
