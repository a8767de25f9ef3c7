"""Numerical verification toolkit for non-homogeneous local Tb constructions."""

__version__ = "0.1.0"
