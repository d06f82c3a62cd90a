"""Multimodal graph-based station demand forecasting."""

__version__ = "0.1.0"
