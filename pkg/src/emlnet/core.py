"""Shared map types, errors and summary statistics.

Maps are plain 2-D ``numpy`` arrays indexed ``[row, col]`` with the origin at
the top-left.  Density maps hold nonnegative reals; fixation maps hold 0/1.
Everything here is computed in float64.
"""

from dataclasses import dataclass

import numpy as np


class SaliencyError(ValueError):
    """Base class for every input/contract error raised by the package."""


class ZeroMass(SaliencyError):
    pass


class DegenerateInput(SaliencyError):
    pass


class ShapeMismatch(SaliencyError):
    pass


class EmptyFixations(SaliencyError):
    pass


class AllFixated(SaliencyError):
    pass


class EmptyNegativePool(SaliencyError):
    pass


class OddDimension(SaliencyError):
    pass


class OutOfBounds(SaliencyError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


class NonFiniteLoss(ArithmeticError):
    """Training produced a non-finite loss.

    ``checkpoint`` carries the last good checkpoint, when one exists.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class GridStats:
    mean: float
    std: float


def as_density(values):
    """Return ``values`` as a float64 2-D array, checking nonnegativity."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatch(f"expected a non-empty 2-D map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SaliencyError("map contains non-finite values")
    if np.any(arr < 0):
        raise SaliencyError("density map contains negative values")
    return arr


def as_fixations(values):
    """Return ``values`` as a float64 0/1 array."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D fixation map, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if not np.all((arr == 0) | (arr == 1)):
        raise SaliencyError("fixation map must contain only 0 and 1")
    return arr


def check_same_shape(*maps):
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ShapeMismatch(f"map shapes differ: {sorted(shapes)}")


def normalize_sum(values):
    """Scale a nonnegative map so that it sums to one."""
    arr = as_density(values)
    total = arr.sum()
    if total <= 0:
        raise ZeroMass("map has zero total mass")
    return arr / total


def grid_stats(values):
    """Mean and population standard deviation of a map."""
    arr = np.asarray(values, dtype=np.float64)
    if is_constant(arr):
        # exact answer; the two-pass formula can leave an ulp of spread
        return GridStats(float(arr.flat[0]), 0.0)
    mean = arr.mean()
    std = np.sqrt(np.mean((arr - mean) ** 2))
    return GridStats(float(mean), float(std))


def is_constant(arr):
    return arr.size == 0 or bool(np.all(arr == arr.flat[0]))


def standardize(values):
    """Shift and scale a map to zero mean and unit population std.

    Raises DegenerateInput for a constant map.
    """
    arr = np.asarray(values, dtype=np.float64)
    stats = grid_stats(arr)
    if stats.std == 0:
        raise DegenerateInput("map has zero variance")
    return (arr - stats.mean) / stats.std
