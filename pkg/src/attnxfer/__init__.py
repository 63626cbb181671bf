"""Attention-map transfer from image classifiers to video recognition."""

__version__ = "0.1.0"
