"""Keypoint-assisted nuclei detection, classification and instance segmentation."""

__version__ = "0.1.0"
