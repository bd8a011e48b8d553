"""Adaptive residual-minimization finite elements for the 2D p-Laplacian."""

__version__ = "0.1.0"
