"""Expandable multi-layer saliency prediction at desk scale.

Metrics, differentiable saliency losses, a small numpy convolution toolkit,
and the piecewise encoder/decoder training pipeline built on top of it.
"""

from emlnet.core import (
    GridStats,
    SaliencyError,
    ZeroMass,
    DegenerateInput,
    ShapeMismatch,
    EmptyFixations,
    grid_stats,
    normalize_sum,
    standardize,
)

__version__ = "0.1.0"

__all__ = [
    "GridStats",
    "SaliencyError",
    "ZeroMass",
    "DegenerateInput",
    "ShapeMismatch",
    "EmptyFixations",
    "grid_stats",
    "normalize_sum",
    "standardize",
]
