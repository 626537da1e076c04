"""Desk-scale reinforcement-learning platform for power-grid emergency control."""

__version__ = "0.1.0"
