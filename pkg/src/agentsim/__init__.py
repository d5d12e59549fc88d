"""Serving simulator for search agents backed by a real graph ANN index."""

__version__ = "0.1.0"
