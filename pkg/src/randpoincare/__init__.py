"""Random Poincare maps of noisy oscillators and their metastable spectra."""

from . import errors
from ._backend import available as available_backends, current as current_backend
from .sde import (
    CrossingChain,
    Path,
    SdeModel,
    Section,
    detect_crossings,
    integrate_path,
    path_action,
    radial_model,
    reference_model,
)

__all__ = [
    "CrossingChain", "Path", "SdeModel", "Section", "available_backends",
    "current_backend", "detect_crossings", "errors", "integrate_path",
    "path_action", "radial_model", "reference_model",
]
__version__ = "0.1.0"
