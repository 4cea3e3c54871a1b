"""Accuracy-bounded low-rank compression of small CNNs in pure numpy."""

__version__ = "0.1.0"
