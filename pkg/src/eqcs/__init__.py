"""Equivariant generative priors for compressed sensing with unknown orientation."""

__version__ = "0.1.0"
