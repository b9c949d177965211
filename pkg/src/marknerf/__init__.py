"""Watermarking neural radiance fields with a secret camera view as the key."""

__version__ = "0.1.0"
