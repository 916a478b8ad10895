"""Sparse polynomial expansions of parametric elliptic problems on the unit interval."""

__version__ = "0.1.0"
