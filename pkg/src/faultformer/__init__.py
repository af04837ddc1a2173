"""Transformer-based bearing fault classification with masked pretraining."""

__version__ = "0.1.0"
