"""Explainable surrogate reactive power optimisation for radial feeders."""

__version__ = "0.1.0"
