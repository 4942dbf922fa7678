"""Adversarial-robustness laboratory for small vision encoders."""

__version__ = "0.1.0"
