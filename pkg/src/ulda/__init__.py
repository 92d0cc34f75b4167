"""Unsupervised few-shot learning with diverse support/query augmentation."""
__version__ = "0.1.0"
