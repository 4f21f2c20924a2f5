"""Semi-supervised volumetric segmentation with a promptable-oracle consistency branch."""

__version__ = "0.1.0"
