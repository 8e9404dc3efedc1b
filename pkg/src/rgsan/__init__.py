"""Spatially-aware referring segmentation of point clouds with rule-guided weak supervision."""

__version__ = "0.1.0"
