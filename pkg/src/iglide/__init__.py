"""Grouped autoencoders, pathway health indicators and uncertainty features
for remaining-useful-life estimation."""

__version__ = "0.1.0"
