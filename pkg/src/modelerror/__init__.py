"""Additive model-error estimation and stochastic parameterization for ensemble DA."""

__version__ = "0.1.0"
