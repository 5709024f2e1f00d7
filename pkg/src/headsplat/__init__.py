"""Mesh-bound Gaussian splat head avatars completed with generator pseudo-supervision."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
