"""Patch position regression for unsupervised anomaly detection in 3D volumes."""

__version__ = "0.1.0"
