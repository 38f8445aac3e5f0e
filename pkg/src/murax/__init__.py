"""Radiograph abnormality detection pipeline."""

__version__ = "0.1.0"
