"""Landmark heatmap regression with transfer-learning regularizers, on a numpy autodiff core."""

__version__ = "0.1.0"
