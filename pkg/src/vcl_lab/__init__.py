"""Variance constancy loss and the statistics behind it."""

__version__ = "0.1.0"
