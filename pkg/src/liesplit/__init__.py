"""Disentangling coupled image transformations with learned affine flow fields."""
__version__ = "0.1.0"
