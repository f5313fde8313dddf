"""Gaussian smoothing for continuous-discrete stochastic dynamic systems."""

__version__ = "0.1.0"
