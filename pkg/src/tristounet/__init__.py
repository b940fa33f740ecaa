"""Triplet-loss sequence embeddings for speaker comparison and change detection."""

__version__ = "0.1.0"
