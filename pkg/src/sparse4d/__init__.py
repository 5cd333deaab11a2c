"""Sparse multi-view, multi-frame 3D detection decoder on a small numpy autodiff engine."""

__version__ = "0.1.0"
