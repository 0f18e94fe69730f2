"""Latent-space PDE surrogates with propagated uncertainty."""

__version__ = "0.1.0"
