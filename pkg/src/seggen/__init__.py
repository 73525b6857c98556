"""Segmental latent-template toolkit for data-to-text generation."""

__version__ = "0.1.0"
