"""Unsupervised domain adaptation benchmark for parameter-conditioned mesh surrogates."""
from .exceptions import MeshUDAError

__version__ = "0.1.0"
__all__ = ["MeshUDAError", "__version__"]
