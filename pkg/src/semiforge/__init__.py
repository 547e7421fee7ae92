"""Class-imbalanced semi-supervised learning with hard-example mining on vector data."""

__version__ = "0.1.0"
