"""Numerical laboratory for domain transferability as function-class regularization."""

__version__ = "0.1.0"
