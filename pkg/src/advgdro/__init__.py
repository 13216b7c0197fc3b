"""Adversarial group DRO and its baselines on small numpy models."""

__version__ = "0.1.0"
