"""Longitudinal surface-based spatial Bayesian GLM for task fMRI."""

__version__ = "0.1.0"
