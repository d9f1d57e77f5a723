"""Robust low-degree Hellinger-Reissner finite elements for planar elasticity."""

__version__ = "0.1.0"
