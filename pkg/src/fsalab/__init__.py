"""Frequency-space adversarial attack laboratory."""

__version__ = "0.1.0"
