"""Numerical lab for the sharp-interface surface-charge energy."""
__version__ = "0.1.0"
