"""Learned lossy coding of transformer activations for split inference."""

__version__ = "0.1.0"
