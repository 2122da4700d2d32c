"""Unbiased shifts of two-sided Brownian motion on a discrete grid."""

__version__ = "0.1.0"
