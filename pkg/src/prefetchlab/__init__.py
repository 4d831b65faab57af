"""Trace-driven database prefetching laboratory."""

__version__ = "0.1.0"
