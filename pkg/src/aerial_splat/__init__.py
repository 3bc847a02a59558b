"""Gaussian-splatting surface reconstruction for large aerial scenes."""

__version__ = "0.1.0"
