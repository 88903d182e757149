"""Robust, graph-regularized ellipse fitting for z-stacks of microscopy slices."""
__version__ = "0.1.0"
