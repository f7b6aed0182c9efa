"""Streaming perception simulation and evaluation testbed."""

__version__ = "0.1.0"
