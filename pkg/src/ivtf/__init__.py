"""Instrumental-variable regression, bi-level GD-2SLS, and a looped ReLU
transformer construction that emulates it."""

from . import datagen, estimators, gd2sls, numerics, transformer

__version__ = "0.1.0"

__all__ = ["numerics", "datagen", "estimators", "gd2sls", "transformer", "__version__"]
