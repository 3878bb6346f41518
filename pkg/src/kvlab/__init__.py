"""kvlab: KV-cache privacy attacks and reversible block obfuscation on a toy decoder."""

__version__ = "0.1.0"
