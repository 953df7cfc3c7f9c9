"""Composite federated optimization laboratory."""

__version__ = "0.1.0"
