"""Dilated convolution with learnable spacings for audio tagging."""

__version__ = "0.1.0"
