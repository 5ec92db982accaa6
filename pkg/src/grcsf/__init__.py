"""Lesion segmentation with global and regional compensation units on a nested U-Net."""

__version__ = "0.1.0"
