"""Clip-wise video object detection with identity-consistent temporal aggregation."""

__version__ = "0.1.0"
