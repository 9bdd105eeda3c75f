"""Desk-scale video-diffusion feature extraction and action recognition."""

__version__ = "0.1.0"
