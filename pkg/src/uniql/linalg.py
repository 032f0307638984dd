"""Deterministic dense linear algebra primitives for sorting and quantization.

Everything is float64. Correlation accumulation, leverage scoring, PSD roots
and SVDs all run through here so tests can count exactly which (and how many)
matrix solves a sorting pass performs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalDomainError, ShapeError
from .validation import check_matrix, check_symmetric, check_vector

# Active operation logs. Each entry is (kind, dimension); multiple nested
# trackers may observe the same call.
_OP_LOGS: list[list[tuple[str, int]]] = []


def _log_op(kind: str, dim: int) -> None:
    for log in _OP_LOGS:
        log.append((kind, dim))


@contextlib.contextmanager
def track_solves():
    """Record every inversion-grade operation (solve/eig-invert) in this module.

    Yields a list of (kind, dim) tuples, appended to as operations run. Used
    to assert the MLP sorting path stays free of large-matrix inversions.
    """
    log: list[tuple[str, int]] = []
    _OP_LOGS.append(log)
    try:
        yield log
    finally:
        _OP_LOGS.remove(log)


@dataclass
class CorrelationStats:
    """Running sum of Gram matrices X^T X over calibration samples.

    Accumulation stays in float64 regardless of the activations' dtype; the
    running sum is re-symmetrized each step so downstream eigendecompositions
    see an exactly symmetric matrix.
    """

    dim: int
    sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    samples_seen: int = 0

    def __post_init__(self) -> None:
        if self.sum is None:
            self.sum = np.zeros((self.dim, self.dim), dtype=np.float64)

    def finalize(self) -> np.ndarray:
        """Average of the accumulated Gram matrices."""
        if self.samples_seen == 0:
            raise NumericalDomainError("no samples accumulated")
        return self.sum / self.samples_seen


def accumulate_correlation(stats: CorrelationStats, X) -> CorrelationStats:
    """Add one sample's Gram matrix X^T X to ``stats`` (in place)."""
    X = check_matrix(X, "X")
    if X.shape[1] != stats.dim:
        raise ShapeError(f"X has {X.shape[1]} columns, stats expect {stats.dim}")
    gram = X.T @ X
    stats.sum += 0.5 * (gram + gram.T)
    stats.samples_seen += 1
    return stats


def _psd_eigh(C: np.ndarray, name: str = "C") -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, rejecting non-PSD inputs
    beyond the -1e-6 * trace/dim tolerance and clipping the remainder to 0."""
    eigvals, Q = np.linalg.eigh(C)
    dim = C.shape[0]
    tol = 1e-6 * max(float(np.trace(C)) / dim, 0.0) + 1e-12
    if eigvals[0] < -tol:
        raise NumericalDomainError(
            f"{name} is not PSD: smallest eigenvalue {eigvals[0]:.3e} below -{tol:.3e}"
        )
    return np.clip(eigvals, 0.0, None), Q


def ridge_leverage(C, lam: float):
    """Ridge leverage scores diag(C (C + lam*I)^-1) of a symmetric PSD matrix.

    Computed through one symmetric eigendecomposition:
    score_j = sum_i eig_i / (eig_i + lam) * Q[j, i]^2, so every score lies in
    [0, 1). This is the single solve the sorting passes are allowed.
    """
    C = check_symmetric(C, "C")
    if lam <= 0:
        raise NumericalDomainError("lam must be > 0")
    eigvals, Q = _psd_eigh(C)
    _log_op("ridge_solve", C.shape[0])
    weights = eigvals / (eigvals + lam)
    return (Q * Q) @ weights


def psd_sqrt(C) -> np.ndarray:
    """Symmetric PSD square root Q diag(sqrt(eig)) Q^T."""
    C = check_symmetric(C, "C")
    eigvals, Q = _psd_eigh(C)
    return (Q * np.sqrt(eigvals)) @ Q.T


def psd_sqrt_column_norms(C) -> np.ndarray:
    """Column 2-norms of the symmetric PSD square root of C."""
    return np.linalg.norm(psd_sqrt(C), axis=0)


def inv_sqrt_psd(C, floor: float | None = None) -> np.ndarray:
    """Inverse square root Q diag(max(eig, floor))^(-1/2) Q^T of a PSD matrix.

    ``floor`` regularizes rank deficiency; it defaults to 1e-6 * max(eig)
    (correlation matrices from small calibration sets are ill-conditioned).
    Eigenvalues that remain zero after flooring map to zero, the
    pseudo-inverse convention.
    """
    C = check_symmetric(C, "C")
    eigvals, Q = _psd_eigh(C)
    if floor is None:
        floor = 1e-6 * float(eigvals.max(initial=0.0))
    clamped = np.maximum(eigvals, floor)
    inv_root = np.where(clamped > 0.0, clamped ** -0.5, 0.0)
    _log_op("eig_invert", C.shape[0])
    return (Q * inv_root) @ Q.T


def inv_psd(C, floor: float | None = None) -> np.ndarray:
    """Floored inverse Q diag(1/max(eig, floor)) Q^T of a PSD matrix."""
    C = check_symmetric(C, "C")
    eigvals, Q = _psd_eigh(C)
    if floor is None:
        floor = 1e-6 * float(eigvals.max(initial=0.0))
    clamped = np.maximum(eigvals, floor)
    inv = np.where(clamped > 0.0, 1.0 / clamped, 0.0)
    _log_op("eig_invert", C.shape[0])
    return (Q * inv) @ Q.T


def svd(W) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD: W = U diag(sigma) Vt, sigma non-negative descending."""
    W = check_matrix(W, "W")
    U, sigma, Vt = np.linalg.svd(W, full_matrices=False)
    return U, sigma, Vt


def argsort_desc(s) -> np.ndarray:
    """Stable descending argsort; ties resolve by ascending original index."""
    s = check_vector(s, "scores")
    return np.argsort(-s, kind="stable")
