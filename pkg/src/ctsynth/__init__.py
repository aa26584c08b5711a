"""Lung CT synthesis from segmentation maps with a global-local conditional GAN."""

__version__ = "0.1.0"
