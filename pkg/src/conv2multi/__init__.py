"""Translate convolution-method STEM simulations into multislice-like images."""

__version__ = "0.1.0"
