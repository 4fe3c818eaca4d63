"""Data-enabled predictive control for piecewise affine systems."""

__version__ = "0.1.0"
