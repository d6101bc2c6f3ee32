"""Entropy-guided multi-layer region descriptor engine."""

__version__ = "0.1.0"
