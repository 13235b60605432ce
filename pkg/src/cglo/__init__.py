"""Sparse-view CT reconstruction with conditioned generative latent optimization."""

__version__ = "0.1.0"
