"""Distributed disk-based approximate nearest neighbor search over one global graph."""

__version__ = "0.1.0"
