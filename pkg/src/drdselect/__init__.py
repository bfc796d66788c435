"""Likelihood-informed core-set selection via diffusion reconstruction deviation."""
__version__ = "0.1.0"
