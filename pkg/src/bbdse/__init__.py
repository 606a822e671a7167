"""Backward-bounded dynamic symbolic execution over a toy ISA."""

__version__ = "0.1.0"
