"""Assembly language model pre-training and embedding toolkit."""

__version__ = "0.1.0"
