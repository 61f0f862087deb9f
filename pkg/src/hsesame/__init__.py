"""Bayesian multi-dipole M/EEG source estimation with adaptive SMC, fixed or hyperprior noise scale."""

__version__ = "0.1.0"
