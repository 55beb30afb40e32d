"""Offline prompt-to-embedding export tool."""

__version__ = "0.1.0"
