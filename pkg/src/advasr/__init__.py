"""Adversarial training of attention/CTC speech recognizers with a criticizing language model."""

__version__ = "0.1.0"
