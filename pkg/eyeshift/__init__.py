"""Unsupervised gaze correction and animation with coarse-to-fine inpainting."""

__version__ = '0.1.0'
