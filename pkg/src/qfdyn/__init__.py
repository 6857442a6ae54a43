"""Quantile-function dynamics for intra-daily return distributions."""

__version__ = "0.1.0"
