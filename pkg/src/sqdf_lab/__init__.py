"""Desk-scale lab for soft-Q diffusion fine-tuning on 2-D toy data."""

__version__ = "0.1.0"
