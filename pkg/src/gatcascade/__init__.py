"""Cascaded graph-attention landmark regression on numpy."""
__version__ = "0.1.0"
