"""Adversarially trained positive-negative prototype classifiers at desk scale."""

__version__ = "0.1.0"
