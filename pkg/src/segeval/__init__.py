"""Evaluation and label-generation toolkit for unsupervised semantic segmentation."""

__version__ = "0.1.0"

from .formats import IGNORE, OTHER, FormatError  # noqa: E402,F401
