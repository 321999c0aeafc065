"""Weakly-supervised microorganism counting toolkit."""

__version__ = "0.1.0"
