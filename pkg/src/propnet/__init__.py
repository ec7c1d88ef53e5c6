"""Path-loss prediction as image-to-image regression."""

__version__ = "0.1.0"
