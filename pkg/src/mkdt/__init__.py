"""Desk-scale dataset distillation for self-supervised pre-training."""

__version__ = "0.1.0"
