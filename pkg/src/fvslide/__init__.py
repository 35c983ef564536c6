"""Patch selection by cellularity and Fisher-vector encoding for tiled slide classification."""

__version__ = "0.1.0"
