"""Elastic batch inference over a simulated container cluster."""

__version__ = "0.1.0"
