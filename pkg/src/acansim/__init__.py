"""Simulator for tuple-space coordinated training on unreliable processors."""

__version__ = "0.1.0"
