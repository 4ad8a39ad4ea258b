"""Security evaluation toolkit for perceptual image encryption."""

__version__ = "0.1.0"
