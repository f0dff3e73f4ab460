"""Optimal-transport alignment of image and disease-label embeddings."""

__version__ = "0.1.0"
