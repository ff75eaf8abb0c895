"""Federated trajectory distillation for server-side adversarial training."""

__version__ = "0.1.0"
