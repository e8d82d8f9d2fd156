"""Expressive piano performance rendering from transcribed scores."""

__version__ = "0.1.0"
