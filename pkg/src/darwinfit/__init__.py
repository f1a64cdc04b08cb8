"""Transient Darwin quasistatic field simulation on a staggered Cartesian grid."""
from .linsolve import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
