"""Fully convolutional sequence-to-sequence voice conversion on numpy."""

__version__ = "0.1.0"
