"""Federated learning with server-side foundation-model biasing."""

__version__ = "0.1.0"
