"""Blind x4 super-resolution with multi-scale attention U-Net discriminators."""

__version__ = "0.1.0"
