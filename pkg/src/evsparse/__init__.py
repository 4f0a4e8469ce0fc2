"""Hierarchical sparse coding of event-camera time surfaces."""

__version__ = "0.1.0"
