"""Rank-4 tensor sampling and moment statistics.

Tensors are plain float64 ``numpy.ndarray`` values of shape
(n_batch, n_channels, height, width); nothing here wraps them.  Moments are
accumulated block-wise with Kahan compensation across block sums so the
estimator bias stays far below the Monte-Carlo tolerances used elsewhere.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidShapeError
from .rng import RngStream, sample_normals

__all__ = ["sample_gaussian", "mean", "second_moment", "variance", "as_tensor4"]

_BLOCK = 1 << 20


def as_tensor4(x: np.ndarray) -> np.ndarray:
    """Validate rank-4 shape with positive dims and return a float64 view."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 4:
        raise InvalidShapeError(f"expected a rank-4 tensor, got rank {a.ndim}")
    if min(a.shape) < 1:
        raise InvalidShapeError(f"all dimensions must be >= 1, got {a.shape}")
    return a


def sample_gaussian(shape: tuple[int, int, int, int], rng: RngStream) -> np.ndarray:
    """i.i.d. N(0, 1) tensor of the given (N, C, H, W) shape; deterministic in rng."""
    if len(shape) != 4:
        raise InvalidShapeError(f"shape must have 4 dimensions, got {shape}")
    if any(int(d) < 1 for d in shape):
        raise InvalidShapeError(f"all dimensions must be >= 1, got {shape}")
    n = int(np.prod([int(d) for d in shape], dtype=np.int64))
    return sample_normals(n, rng).reshape(shape)


def _compensated_sum(flat: np.ndarray) -> float:
    # Kahan compensation across pairwise block sums: one pass, stable.
    total = 0.0
    comp = 0.0
    for off in range(0, flat.size, _BLOCK):
        y = float(np.sum(flat[off : off + _BLOCK])) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _compensated_sum_sq(flat: np.ndarray) -> float:
    total = 0.0
    comp = 0.0
    for off in range(0, flat.size, _BLOCK):
        b = flat[off : off + _BLOCK]
        y = float(np.sum(b * b)) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def mean(t: np.ndarray) -> float:
    """Arithmetic mean over all entries."""
    a = np.asarray(t, dtype=np.float64)
    if a.size == 0:
        raise DegenerateInputError("mean of an empty tensor")
    return _compensated_sum(a.ravel()) / a.size


def second_moment(t: np.ndarray) -> float:
    """Mean of squared entries, E[x^2]."""
    a = np.asarray(t, dtype=np.float64)
    if a.size == 0:
        raise DegenerateInputError("second moment of an empty tensor")
    return _compensated_sum_sq(a.ravel()) / a.size


def variance(t: np.ndarray) -> float:
    """Population variance: second_moment(t) - mean(t)**2."""
    a = np.asarray(t, dtype=np.float64)
    if a.size < 2:
        raise DegenerateInputError("variance needs at least 2 entries")
    return second_moment(a) - mean(a) ** 2
