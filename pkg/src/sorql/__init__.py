"""Successive over-relaxation Q-learning laboratory."""

__version__ = "0.1.0"
