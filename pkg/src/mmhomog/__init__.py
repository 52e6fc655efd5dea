"""Unsupervised multimodal homography estimation by alternating geometry / representation learning."""

__version__ = "0.1.0"
