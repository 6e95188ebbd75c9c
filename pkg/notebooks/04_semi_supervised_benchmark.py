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
# # Pseudo-labels and the student
#
# One seed of the benchmark at reduced size. A diffusion teacher is trained on
# the labeled tenth. Each pseudo-labeling method fills in the rest, then a
# student regressor is trained on labels plus pseudo-labels and scored on
# held-out scenes. The full five-seed comparison lives in the acceptance
# suite and takes several minutes.

# %%
from __future__ import annotations

import time

import numpy as np

from diffrefine import engine
from diffrefine.config import ExperimentConfig
from diffrefine.pipeline import SeedRun, make_testset

engine.configure(1)
cfg = ExperimentConfig()
cfg.dataset.n = 2000
print("refinement step:", cfg.t_init())

# %%
run = SeedRun(cfg, 0, make_testset(cfg))
start = time.perf_counter()
for method in ("no-refine", "argmax-refine", "direct-mapping", "pure-noise", "gcdr", "supervised"):
    rep = run.run(method)
    print(f"{method:15s} AvgDist {rep.mean_avg_dist:.4f}  MinDist {rep.mean_min_dist:.4f}  AUC {rep.mean_auc:.3f}")
print(f"{time.perf_counter() - start:.0f} s", {k: round(v, 1) for k, v in run.timings.items()})

# %% [markdown]
# ## Pseudo-label quality on the unlabeled split
#
# Peak distance to the hidden ground truth. Only this notebook looks at it;
# the pipeline never does.

# %%
from diffrefine.heatmap import argmax_points

hidden = run.data.gt_points[~run.data.labeled]
for method in ("no-refine", "pure-noise", "gcdr"):
    peaks = argmax_points(run.pseudo_labels(method))
    print(f"{method:12s} {np.mean(np.linalg.norm(peaks - hidden, axis=1)):.4f}")
