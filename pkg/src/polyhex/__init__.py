"""Conditional dual-latent diffusion for polycube clouds and polycube-to-hex meshing."""

__version__ = "0.1.0"
