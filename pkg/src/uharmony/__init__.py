"""Harmonization/restoration layers, domain-gated head, and a desk-scale
training and verification harness for joint 3D segmentation across
heterogeneous domains."""

from .tensor import Tensor, GradTape

__all__ = ["Tensor", "GradTape"]
__version__ = "0.1.0"
