"""Volumetric segmentation with an adaptively weighted Tversky + cross-entropy objective."""

__version__ = "0.1.0"
