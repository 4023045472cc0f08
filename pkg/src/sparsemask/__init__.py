"""Differentiable connectivity search for encoder-decoder dense prediction networks."""

__version__ = "0.1.0"
