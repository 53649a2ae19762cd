"""Computation-graph transformer toolkit."""

__version__ = "0.1.0"
