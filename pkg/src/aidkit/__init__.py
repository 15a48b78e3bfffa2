"""Interpolated-attention sequence generation on a toy conditional diffusion model."""

__version__ = "0.1.0"
