"""Multiscale differential selective state-space classifier for multivariate time series."""

__version__ = "0.1.0"
