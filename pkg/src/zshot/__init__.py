"""Desk-scale generative zero-shot point-cloud segmentation."""

__version__ = "0.1.0"
