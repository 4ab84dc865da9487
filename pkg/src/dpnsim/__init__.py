"""Discrete-event simulator of private e-commerce delivery networks."""

__version__ = "0.1.0"
