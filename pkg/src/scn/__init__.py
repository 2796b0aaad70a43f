"""Weakly supervised video moment retrieval by semantic completion."""

__version__ = "0.1.0"
