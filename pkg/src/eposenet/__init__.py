"""Roto-translation equivariant absolute pose regression on CPU."""

__version__ = "0.1.0"
