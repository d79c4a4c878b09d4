"""Landmark-guided head fitting, texture recovery and completion, asset matching."""

__version__ = "0.1.0"
