"""Uniform observability toolkit for vanishing-viscosity gradient transport."""
__version__ = "0.1.0"
