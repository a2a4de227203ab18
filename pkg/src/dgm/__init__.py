"""Continual class-incremental learning with a masked, growing generative memory."""
__version__ = "0.1.0"
