"""GABO: graph-classification training lab with learned augmentation maps."""

__version__ = "0.1.0"
