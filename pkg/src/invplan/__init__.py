"""Predict-then-optimize weekly inventory planning."""
__version__ = "0.1.0"
