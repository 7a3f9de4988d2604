"""Normative modelling of 3D volumes with a VQ-VAE and an autoregressive transformer."""

__version__ = "0.1.0"
