"""Numerical laboratory for the normalized Yamabe flow on manifolds with minimal boundary."""
__version__ = "0.1.0"
