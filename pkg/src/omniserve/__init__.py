"""Disaggregated multi-stage serving on a stage graph of batched engines."""

__version__ = "0.1.0"
