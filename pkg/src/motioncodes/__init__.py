"""Discrete motion-code learning from long frame-wise sequences."""

__version__ = "0.1.0"
