"""Empirical gramians for combined state and parameter reduction."""

__version__ = "0.1.0"
