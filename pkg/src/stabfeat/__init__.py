"""Stability-map feature selection for place recognition."""

__version__ = "0.1.0"
