"""Sampling-based screening of Local Authorities with three-level mixed models."""

__version__ = "0.1.0"
