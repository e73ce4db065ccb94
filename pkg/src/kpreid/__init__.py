"""Keypoint propagation and keypoint-embedding ViT re-identification."""

__version__ = "0.1.0"
