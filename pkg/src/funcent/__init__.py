"""Functional-entropy and functional-variance regularization for multi-modal classifiers."""

__version__ = "0.1.0"
