"""DAFR single-image super-resolution: a numpy training and inference engine."""

__version__ = "0.1.0"
