"""Blocked, hierarchical VAE for disentangled representations, with a
numpy autodiff substrate, disentanglement metrics and desk-scale data."""

__version__ = "0.1.0"
