"""Octic-equivariant vision transformer kernels and verification tools."""

__version__ = "0.1.0"
