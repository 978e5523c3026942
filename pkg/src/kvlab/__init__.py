"""kvlab: a desk-scale KV-cache compression laboratory."""

__version__ = "0.1.0"
