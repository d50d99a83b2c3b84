"""Certified reduced basis methods for control-constrained elliptic problems."""

__version__ = "0.1.0"
