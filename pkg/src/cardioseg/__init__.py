"""Cardiac MRI segmentation pipeline and cascade pathology classification."""

__version__ = "0.1.0"
