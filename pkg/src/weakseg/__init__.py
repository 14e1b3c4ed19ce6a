"""Weakly supervised point cloud segmentation with feature reallocation."""

__version__ = "0.1.0"
