"""Toy-scale one-step diffusion JPEG artifact removal."""

__version__ = "0.1.0"
