"""Diffusion refinement of noisy heatmap priors for semi-supervised point-target prediction."""
