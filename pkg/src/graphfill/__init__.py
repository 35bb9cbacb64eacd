"""Sparse spatiotemporal attention for imputing missing sensor-network series."""

__version__ = "0.1.0"
