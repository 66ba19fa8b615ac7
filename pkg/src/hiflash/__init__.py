"""Hierarchical federated learning simulator with staleness control and
client-edge association."""

__version__ = "0.1.0"
