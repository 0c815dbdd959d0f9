"""Instruction-path alignment discriminator toolkit with a synthetic navigation world."""

__version__ = "0.1.0"
