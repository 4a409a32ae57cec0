"""Deterministic simulator for federated meta-learning with representation encoding."""

__version__ = "0.1.0"
