"""Hierarchical three-stage ECG transformer on a small numpy autodiff engine."""

__version__ = "0.1.0"
