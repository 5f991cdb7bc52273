"""Causal preference learning laboratory."""
__version__ = "0.1.0"
