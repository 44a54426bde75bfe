"""Conditional sampling of multiscale SDEs with a conditional GAN and umbrella sampling."""

__version__ = "0.1.0"
