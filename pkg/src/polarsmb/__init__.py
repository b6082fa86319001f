"""Nearest-neighbor Gaussian process regression on the sphere with a
non-separable distance-elevation covariance, a fully Bayesian sampler with a
latent measurement-reliability mixture, area-correct posterior-predictive
mapping, holdout evaluation, and sequential IMSE site selection."""

__version__ = "0.1.0"
