"""Desk-scale concept-erasure laboratory on a toy conditional diffusion model."""

__version__ = "0.1.0"
