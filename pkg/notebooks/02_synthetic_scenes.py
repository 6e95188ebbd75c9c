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
# # Synthetic gaze scenes and noisy priors
#
# Each scene has a head, a gaze direction and a few salient objects, one of
# which is the target. The student sees four condition channels. The noisy
# prior stands in for an attention map from a pretrained model: often right,
# sometimes diffuse, occasionally on the wrong object or pure noise.

# %%
from __future__ import annotations

import numpy as np

from diffrefine.config import ExperimentConfig
from diffrefine.heatmap import argmax_points
from diffrefine.pipeline import prior_mix, scene_params
from diffrefine.synth import PRIOR_CLASSES, make_dataset, prior_avg_dist

cfg = ExperimentConfig()
ds = make_dataset(2000, cfg.dataset.labeled_fraction, 0, scene_params(cfg), prior_mix(cfg))
print("grid", ds.size.shape, "labeled", int(ds.labeled.sum()), "of", len(ds))
print("condition channels:", ds.conditions.shape[1])

# %% [markdown]
# ## Prior quality by class

# %%
dist = np.linalg.norm(argmax_points(ds.priors) - ds.gt_points, axis=1)
for c, name in enumerate(PRIOR_CLASSES):
    sel = ds.prior_classes == c
    print(f"{name:12s} share {sel.mean():.2f}  mean peak distance {dist[sel].mean():.3f}")
print("corpus prior AvgDist:", round(prior_avg_dist(ds), 4))

# %% [markdown]
# ## A quick look at one scene
#
# Values are printed as a coarse text map; `diffrefine --dump-pgm N generate`
# writes image files instead.

# %%
def show(h):
    chars = " .:-=+*#%@"
    h = (h - h.min()) / (np.ptp(h) + 1e-9)
    for row in h:
        print("".join(chars[int(v * 9)] for v in row))


show(ds.gt_heatmaps[0])
print()
show(ds.priors[0])
