"""Adversarial example generation and detection for small convolutional classifiers."""

__version__ = "0.1.0"
