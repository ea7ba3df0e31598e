"""Emulated homomorphic matrix multiplication, covariance and PCA."""

__version__ = "0.1.0"
