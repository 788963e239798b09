"""Deviation-space lesion synthesis: substrate estimation plus mask-constrained diffusion."""

__version__ = "0.1.0"
