"""Gradient-based second-order structured pruning for weight matrices and LoRA adapters."""

__version__ = "0.1.0"
