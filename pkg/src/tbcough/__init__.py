"""Cough-based TB classification: features, recurrent models, GE2E training and analysis."""

__version__ = "0.1.0"
