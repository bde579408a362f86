"""Guided-diffusion gap filling for land surface temperature grids."""

__version__ = "0.1.0"
