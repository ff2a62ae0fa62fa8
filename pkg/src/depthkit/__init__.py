"""Geometric and numeric kernels for cross-camera metric depth estimation."""

__version__ = "0.1.0"
