"""Pitch-synchronous multi-scale GAN vocoder."""

__version__ = "0.1.0"
