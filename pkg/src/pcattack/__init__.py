"""Posterior collapse attacks against VAE encoders."""

__version__ = "0.1.0"
