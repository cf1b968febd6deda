"""Spectral-element transformer for learning turbulent flows."""

__version__ = "0.1.0"
