"""Equivariant interatomic force field engine with emulated precision policies."""

__version__ = "0.1.0"
