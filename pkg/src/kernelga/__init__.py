"""Genetic-algorithm search over per-layer kernel sizes of a multi-column CNN."""

__version__ = "0.1.0"
