"""Saliency-skewness sample selection for multi-task point-cloud domain adaptation."""

__version__ = "0.1.0"
