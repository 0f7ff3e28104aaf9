"""Contrastive crop-to-pyramid training for unsupervised object localization."""

__version__ = "0.1.0"
