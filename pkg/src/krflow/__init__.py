"""Numerical lab for the normalized Kähler-Ricci flow on symmetry-reduced Fano models."""

from .errors import KRFlowError
from .geometry import Grid, ModelDescriptor, Profile, cp1, cpn, hirzebruch1, make_model

__all__ = ["KRFlowError", "Grid", "ModelDescriptor", "Profile", "cp1", "cpn", "hirzebruch1", "make_model"]
__version__ = "0.1.0"
