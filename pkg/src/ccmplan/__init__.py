"""Contraction-metric learning, probabilistic certification, and tube-aware planning."""

__version__ = "0.1.0"
