"""Robustness analysis of galaxy-morphology classifiers under survey noise and one-pixel attacks."""

__version__ = "0.1.0"
