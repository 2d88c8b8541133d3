"""Referring-expression generation and comprehension with visual comparison features."""

__version__ = "0.1.0"
