"""Reversible foreground/background separation for concealed object segmentation."""

__version__ = "0.1.0"
