"""Desk-scale hierarchical knowledge-enhanced scene graph generation."""

__version__ = "0.1.0"
