"""Gated multitask CNNs for personality and emotion detection, in pure numpy."""

__version__ = "0.1.0"
