"""Landmark-guided face morph generation and morph-attack evaluation."""

__version__ = "0.1.0"
