"""Retrieval-augmented intent guard with adversarial training and distillation."""

__version__ = "0.1.0"
