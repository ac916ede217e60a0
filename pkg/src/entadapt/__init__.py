"""Fully test-time adaptation of frozen classifiers by entropy minimization."""

__version__ = "0.1.0"
