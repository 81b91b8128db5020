"""Self-knowledge distillation from Mixup, at desk scale."""

__version__ = "0.1.0"
