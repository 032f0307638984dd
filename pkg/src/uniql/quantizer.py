"""Group-wise symmetric weight quantization with SVD scale fusion, GPTQ-style
error compensation, and Hadamard/norm fusion helpers.

Scales stay full precision in memory and round to IEEE half only at
serialization (within 1e-3 relative). When a per-column SVD factor sigma is
supplied, the weight argument is the unscaled factor; codes stay on the
undistorted grid and the stored scale is the exact product s * sigma.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, hadamard

from .errors import NumericalDomainError, ShapeError
from .linalg import CorrelationStats
from .packing import QuantizedTensor, from_codes
from .validation import check_matrix, check_vector

SUPPORTED_BITS = (3, 4, 8)


def _group_bounds(rows: int, group_size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + group_size, rows)) for lo in range(0, rows, group_size)]


def _group_code_scales(block: np.ndarray, bits: int) -> np.ndarray:
    """Per-column code scales s = max|w| / (2^(bits-1) - 1) of one row group.

    A zero group gets scale 0 and all-zero codes, which round-trips exactly.
    """
    qmax = 2 ** (bits - 1) - 1
    return np.abs(block).max(axis=0) / qmax


def _encode(block: np.ndarray, code_scales: np.ndarray, bits: int) -> np.ndarray:
    """Round-half-even codes against the given scales, clamped to the signed
    ``bits``-wide range."""
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(code_scales > 0.0, block / code_scales, 0.0)
    return np.clip(np.round(ratio), qmin, qmax).astype(np.int8)


def quantize_group_sym(W, bits: int = 4, group_size: int = 128,
                       column_scale=None) -> QuantizedTensor:
    """Group-wise uniform symmetric quantization of a (rows, cols) matrix.

    Groups run along the input (row) dimension within each output column, so
    output-channel pruning commutes with dequantization exactly. A trailing
    group shorter than ``group_size`` is allowed; its scale covers the actual
    elements.
    """
    W = check_matrix(W, "W")
    if bits not in SUPPORTED_BITS:
        raise ShapeError(f"bits must be one of {SUPPORTED_BITS}")
    if group_size <= 0:
        raise ShapeError("group_size must be positive")
    rows, cols = W.shape
    if column_scale is not None:
        column_scale = check_vector(column_scale, "column_scale")
        if column_scale.shape[0] != cols:
            raise ShapeError("column_scale length must equal the column count")

    bounds = _group_bounds(rows, group_size)
    codes = np.empty((rows, cols), dtype=np.int8)
    scales = np.empty((len(bounds), cols), dtype=np.float64)
    for g, (lo, hi) in enumerate(bounds):
        block = W[lo:hi]
        s = _group_code_scales(block, bits)
        codes[lo:hi] = _encode(block, s, bits)
        scales[g] = s * column_scale if column_scale is not None else s
    return from_codes(codes, scales, bits, group_size,
                      column_scaled=column_scale is not None)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Float64 reconstruction codes[i, j] * scales[i // group_size, j]."""
    scales = q.scales.astype(np.float64)
    row_scale = np.repeat(scales, q.group_size, axis=0)[: q.rows]
    return q.codes().astype(np.float64) * row_scale


def _inverse_cholesky_upper(C: np.ndarray, damp: float) -> tuple[np.ndarray, float]:
    """Upper Cholesky factor of (C + lam*I)^-1, escalating the damping up to
    four doublings if the factorization fails."""
    dim = C.shape[0]
    mean_diag = float(np.trace(C)) / dim
    lam = damp * mean_diag if mean_diag > 0 else damp
    last_err: Exception | None = None
    for _ in range(5):
        try:
            H = C + lam * np.eye(dim)
            low = cho_factor(H, lower=True)
            Hinv = cho_solve(low, np.eye(dim))
            Hinv = 0.5 * (Hinv + Hinv.T)
            return cholesky(Hinv, lower=False), lam
        except np.linalg.LinAlgError as err:  # pragma: no cover - rare path
            last_err = err
            lam = 2 * lam if lam > 0 else damp
    raise NumericalDomainError(f"Cholesky failed after damping escalation: {last_err}")


def gptq_compensate(W, C, bits: int = 4, group_size: int = 128,
                    damp: float = 0.01, column_scale=None
                    ) -> tuple[QuantizedTensor, float]:
    """Quantize with sequential error compensation over input channels.

    ``C`` is the input-side correlation (Gram) matrix of W's row space, or a
    CorrelationStats to finalize. Rows (input channels) are quantized in
    natural order; after each row the residual is pushed onto not-yet
    quantized rows through the upper Cholesky factor of (C + damp*mean(diag
    C)*I)^-1. Group scales are fixed per row-group when the group is entered,
    from the compensated weights at that point.

    Returns the tensor and the weighted objective tr((W-Wq)^T C (W-Wq)).
    With C = I the compensation is a no-op and the result is bit-identical
    to quantize_group_sym.
    """
    W0 = check_matrix(W, "W")
    if isinstance(C, CorrelationStats):
        C = C.finalize()
    C = check_matrix(C, "C")
    if C.shape != (W0.shape[0], W0.shape[0]):
        raise ShapeError("C must be square over W's input (row) dimension")
    if damp <= 0:
        raise NumericalDomainError("damp must be > 0")
    if bits not in SUPPORTED_BITS:
        raise ShapeError(f"bits must be one of {SUPPORTED_BITS}")
    if column_scale is not None:
        column_scale = check_vector(column_scale, "column_scale")

    U, _ = _inverse_cholesky_upper(C, damp)

    rows, cols = W0.shape
    W = W0.copy()
    codes = np.empty((rows, cols), dtype=np.int8)
    deq = np.empty((rows, cols), dtype=np.float64)
    scales = np.empty((len(_group_bounds(rows, group_size)), cols), dtype=np.float64)
    code_scales = np.zeros(cols)
    for j in range(rows):
        if j % group_size == 0:
            g = j // group_size
            hi = min(j + group_size, rows)
            code_scales = _group_code_scales(W[j:hi], bits)
            scales[g] = (code_scales * column_scale
                         if column_scale is not None else code_scales)
        codes[j] = _encode(W[j], code_scales, bits)
        deq[j] = codes[j] * code_scales
        err = (W[j] - deq[j]) / U[j, j]
        if j + 1 < rows:
            W[j + 1 :] -= np.outer(U[j, j + 1 :], err)

    q = from_codes(codes, scales, bits, group_size,
                   column_scaled=column_scale is not None)
    # Objective on the matrix that was passed in (the unscaled factor when a
    # column scale is fused).
    resid = W0 - deq
    objective = float(np.trace(resid.T @ C @ resid))
    return q, objective


# Which side of each operator faces the residual stream. Readers take the
# rotation on their input rows; writers on their output columns. The other
# side of every projection is a prunable dimension and must stay unrotated
# so channel slicing remains valid.
STREAM_READERS = ("w_q", "w_k", "w_v", "w_up", "w_gate",
                  "w_z", "w_x", "w_b", "w_c", "w_dt", "logit_weight")
STREAM_WRITERS = ("w_o", "w_down", "w_out", "embedding")


@dataclass(frozen=True)
class FusionConfig:
    """Per-operator rotation flags plus the norm-fusion switch.

    input_hadamard/output_hadamard map operator names to whether the
    orthonormal rotation is folded into that side. Prunable sides are
    rejected outright. The all-false config (some models degrade under the
    rotation) leaves weights untouched.
    """

    input_hadamard: dict = field(default_factory=dict)
    output_hadamard: dict = field(default_factory=dict)
    norm_fusion: bool = True

    def __post_init__(self) -> None:
        for name, on in self.input_hadamard.items():
            if on and name in STREAM_WRITERS:
                raise ShapeError(f"{name}: input side is pruned, cannot rotate")
        for name, on in self.output_hadamard.items():
            if on and name in STREAM_READERS:
                raise ShapeError(f"{name}: output side is pruned, cannot rotate")

    def rotates(self, name: str) -> bool:
        return bool(self.input_hadamard.get(name) or self.output_hadamard.get(name))

    @property
    def any_hadamard(self) -> bool:
        return any(self.input_hadamard.values()) or any(self.output_hadamard.values())

    @classmethod
    def default(cls) -> "FusionConfig":
        return cls(input_hadamard={n: True for n in STREAM_READERS},
                   output_hadamard={n: True for n in STREAM_WRITERS},
                   norm_fusion=True)

    @classmethod
    def no_hadamard(cls) -> "FusionConfig":
        return cls(norm_fusion=True)


def hadamard_matrix(n: int) -> np.ndarray:
    """Orthonormal Hadamard matrix (Sylvester construction, n a power of two)."""
    if n <= 0 or n & (n - 1):
        raise ShapeError(f"Hadamard rotation needs a power-of-two size, got {n}")
    return hadamard(n).astype(np.float64) / np.sqrt(n)


def rotate_reader(W, H: np.ndarray) -> np.ndarray:
    """Fold the rotation into a weight that reads the rotated stream: H^T W."""
    return H.T @ check_matrix(W, "W")


def rotate_writer(W, H: np.ndarray) -> np.ndarray:
    """Fold the rotation into a weight that writes the rotated stream: W H."""
    return check_matrix(W, "W") @ H


def fuse_norm(norm_scale, weights):
    """Fold an RMSNorm elementwise scale into the readers that follow it.

    Each weight's rows are scaled (W' = diag(gamma) W); the norm itself
    becomes scale-free and the forward output is unchanged.
    """
    gamma = check_vector(norm_scale, "norm_scale")
    fused = []
    for W in weights:
        W = check_matrix(W, "weight")
        if W.shape[0] != gamma.shape[0]:
            raise ShapeError("norm scale length must match the weight's rows")
        fused.append(gamma[:, None] * W)
    return fused
