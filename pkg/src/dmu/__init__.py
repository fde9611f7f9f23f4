"""Darwinian model upgrades for embedding retrieval."""

__version__ = "0.1.0"
