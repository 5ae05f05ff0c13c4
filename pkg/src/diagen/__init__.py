"""Diversity-oriented synthetic data augmentation around pluggable generators."""

__version__ = "0.1.0"
