"""Contrastive image-text encoder with retrieval-conditioned report decoding."""

__version__ = "0.1.0"
