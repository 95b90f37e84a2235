"""Continual test-time adaptation with multi-level codebook consistency and anchor replay."""

__version__ = "0.1.0"
