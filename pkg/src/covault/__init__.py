"""Deleted-key covenant and vault custody engine."""

__version__ = "0.1.0"
