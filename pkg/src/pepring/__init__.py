"""Guided diffusion over peptide C-alpha chains with composable ring-closure constraints."""

__version__ = "0.1.0"
