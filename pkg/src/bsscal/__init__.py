"""Bayesian calibration of computer models with the BSS-ANOVA emulator."""
from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]

__version__ = "0.1.0"
