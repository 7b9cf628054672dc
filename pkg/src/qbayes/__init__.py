"""Bayesian inference toolkit for binary-outcome quantum experiments."""

__version__ = "0.1.0"
