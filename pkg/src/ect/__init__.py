"""Exhaustive Correlation Transformer (ECT) for spectral super-resolution.

RGB (3 channels) to HSI (31 bands, 400-700 nm at 10 nm) reconstruction with
SD3D token splitting, USSA cosine attention, DLRM low-rank dependence maps,
a multi-stage U-shaped macro network, an HSI-to-RGB simulation pipeline, and
a reproducible training/evaluation harness on a from-scratch autodiff core.
"""

from ect.tensor import (
    Tensor,
    ShapeError,
    NumericsError,
    UnsupportedOpError,
    precision,
    set_default_dtype,
    default_dtype,
    grad_check,
)

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericsError",
    "UnsupportedOpError",
    "precision",
    "set_default_dtype",
    "default_dtype",
    "grad_check",
]

__version__ = "0.1.0"
