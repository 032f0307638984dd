"""Input validation helpers, in the spirit of sklearn's check_array.

All numeric kernels in this package work on C-contiguous float64 2-D arrays;
these helpers normalize inputs to that form and fail loudly on NaN/Inf.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def check_matrix(a, name: str = "matrix", *, allow_1d: bool = False) -> np.ndarray:
    """Return ``a`` as a finite float64 array, validating dimensionality."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim == 1 and allow_1d:
        pass
    elif arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains NaN or Inf")
    return arr


def check_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains NaN or Inf")
    return arr


def check_square(a, name: str = "matrix") -> np.ndarray:
    arr = check_matrix(a, name)
    if arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {arr.shape}")
    return arr


def check_symmetric(a, name: str = "matrix", rtol: float = 1e-6) -> np.ndarray:
    """Validate symmetry within ``rtol`` (relative to the largest entry) and
    return the exactly symmetrized matrix."""
    arr = check_square(a, name)
    scale = max(float(np.abs(arr).max()), 1.0) if arr.size else 1.0
    if arr.size and float(np.abs(arr - arr.T).max()) > rtol * scale:
        raise ShapeError(f"{name} is not symmetric within {rtol:g} relative")
    return 0.5 * (arr + arr.T)


def check_permutation(idx, length: int, name: str = "indices") -> np.ndarray:
    arr = np.asarray(idx, dtype=np.int64)
    if arr.ndim != 1 or arr.shape[0] != length:
        raise ShapeError(f"{name} must be a length-{length} index vector")
    if not np.array_equal(np.sort(arr), np.arange(length)):
        raise ShapeError(f"{name} is not a permutation of 0..{length - 1}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{names} must share a shape, got {a.shape} vs {b.shape}")
