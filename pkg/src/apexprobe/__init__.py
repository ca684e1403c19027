"""Stochastic activation probing for small feedforward networks."""

__version__ = "0.1.0"
