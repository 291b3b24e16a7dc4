"""Convolutional network toolkit for diagnostic-frame classification of endomicroscopy images."""
__version__ = "0.1.0"
