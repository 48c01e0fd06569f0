"""Pose-aware attention for video transformers, on a small float64 autodiff engine."""

__version__ = "0.1.0"
