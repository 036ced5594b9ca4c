"""Fingerprinting toy vision-language models with fine-tuning-robust adversarial triggers."""

__version__ = "0.1.0"
