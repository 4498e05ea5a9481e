"""Multimodal house-price estimation from tabular features and satellite tiles."""

__version__ = "0.1.0"
