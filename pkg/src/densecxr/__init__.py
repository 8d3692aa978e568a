"""Desk-scale DenseNet pipeline for multi-label chest-pathology classification.

The package bundles a small reverse-mode autodiff engine, a DenseNet-BC model,
class-balanced losses, Adam training, evaluation with bootstrap intervals, and
Grad-CAM heatmaps, all over float64 numpy.
"""

__version__ = "0.1.0"
