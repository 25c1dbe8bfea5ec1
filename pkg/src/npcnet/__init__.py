"""Computable phenotyping of ICU episodes with a navigated deep clustering network."""

__version__ = "0.1.0"
