"""Desk-scale Gromov-Wasserstein autoencoder laboratory."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, check_gradient, spectral_normalize

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "check_gradient",
    "spectral_normalize",
    "__version__",
]
