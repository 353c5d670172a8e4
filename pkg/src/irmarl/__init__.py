"""Interaction-rank rewards for offline multi-agent learning."""

__version__ = "0.1.0"
