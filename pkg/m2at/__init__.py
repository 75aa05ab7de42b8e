"""Masking-and-mixing adversarial training lab."""

__version__ = "0.1.0"
