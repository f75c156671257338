"""Module-wise importance sampling for block-coordinate Adam, with memory and FLOPs planning."""

__version__ = "0.1.0"
