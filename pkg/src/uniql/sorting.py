"""Structured weight sorting: exact-equivalence permutations and the
quantization-aware SVD refactorization of the value/output pair.

Every pass reorders channels so on-device pruning becomes a prefix slice:
scores sort DESCENDING, the most important channels come first, and a rate p
keeps the first ceil((1-p)*D) channels. Permutation passes leave the block
function unchanged exactly; the v/o pass is an exact refactorization whose
prefix truncations are rank-optimal under the input correlation metric.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .blocks import AttnWeights, BlockSpec, CalibrationCapture, MambaWeights, MlpWeights
from .errors import CalibrationError, ShapeError
from .linalg import (
    CorrelationStats,
    accumulate_correlation,
    argsort_desc,
    inv_psd,
    inv_sqrt_psd,
    psd_sqrt,
    psd_sqrt_column_norms,
    ridge_leverage,
    svd,
)

PERMUTE_MLP = "permute_mlp"
PERMUTE_QK = "permute_qk_symmetric"
QSVD_VO = "qsvd_vo"
PERMUTE_BC = "permute_bc"
PERMUTE_ZXO = "permute_zxo"


@dataclass
class SortRecord:
    """What was done to one weight group, and how to drive it at deploy time.

    Permutation records carry the applied index vector; qsvd_vo records carry
    no permutation but keep the per-head singular values, which become the
    quantizer's column scales.
    """

    target: str
    kind: str
    indices: np.ndarray | None = None
    head: int | None = None
    per_head: bool = False
    sigma: np.ndarray | None = None

    @property
    def rope_gather(self) -> np.ndarray:
        """Half-dim gather indices for the fused rotary path (q/k records)."""
        if self.kind != PERMUTE_QK or self.indices is None:
            raise ShapeError("rope gather only exists on q/k records")
        return self.indices[: self.indices.shape[0] // 2]


def _require_captures(calib: list[CalibrationCapture]) -> None:
    if not calib:
        raise CalibrationError("empty calibration set")


def _mean_correlation(samples: list[np.ndarray]) -> np.ndarray:
    stats = CorrelationStats(samples[0].shape[1])
    for X in samples:
        accumulate_correlation(stats, X)
    return stats.finalize()


def sort_mlp(w: MlpWeights, calib: list[CalibrationCapture], lam: float = 1.0
             ) -> tuple[MlpWeights, SortRecord]:
    """Reorder intermediate channels by ridge leverage of the gated activation.

    The only matrix solve is the ridge solve inside the leverage scores; no
    pseudo-inverse of the D_int x D_int correlation is ever formed, so the
    sorted weights stay exactly equivalent and prunable at any rate.
    """
    _require_captures(calib)
    acts = [c.mlp_intermediate for c in calib]
    if any(a is None for a in acts):
        raise CalibrationError("captures lack the MLP intermediate activation")
    C = _mean_correlation(acts)
    idx = argsort_desc(ridge_leverage(C, lam))
    sorted_w = MlpWeights(
        w_up=w.w_up[:, idx].copy(),
        w_gate=w.w_gate[:, idx].copy(),
        w_down=w.w_down[idx, :].copy(),
    )
    return sorted_w, SortRecord(target="mlp", kind=PERMUTE_MLP, indices=idx)


def _qk_symmetric_index(score: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = score.shape[0] // 2
    pi = argsort_desc(score[:half] + score[half:])
    return pi, np.concatenate([pi, half + pi])


def sort_qk(w: AttnWeights, calib: list[CalibrationCapture], spec: BlockSpec,
            mode: str | None = None) -> tuple[AttnWeights, list[SortRecord]]:
    """Symmetric q/k channel sorting per kv head.

    Per kv head, the post-rotary correlation root norms of the keys multiply
    those of each query head in the group (summed over the group for grouped
    query attention). The score vector is split in half and the halves are
    sorted together, so pair (j, j+D/2) stays a rotary pair; the half-length
    permutation is recorded for the fused rotary gather.
    """
    _require_captures(calib)
    if mode is None:
        mode = "mhsa" if spec.n_heads == spec.n_kv_heads else "gqa"
    if mode == "mhsa" and spec.n_heads != spec.n_kv_heads:
        raise ShapeError("mhsa mode requires n_heads == n_kv_heads")
    if any(c.q_rope is None or c.k_rope is None for c in calib):
        raise CalibrationError("captures lack post-rotary q/k activations")

    d_hd = spec.d_head
    if d_hd % 2:
        raise ShapeError("d_head must be even")
    rep = spec.heads_per_kv
    w_q = w.w_q.copy()
    w_k = w.w_k.copy()
    records = []
    for j in range(spec.n_kv_heads):
        C_k = _mean_correlation([c.k_rope[j] for c in calib])
        k_norm = psd_sqrt_column_norms(C_k)
        score = np.zeros(d_hd)
        for r in range(rep):
            i = j * rep + r
            C_q = _mean_correlation([c.q_rope[i] for c in calib])
            score += psd_sqrt_column_norms(C_q) * k_norm
        _, idx = _qk_symmetric_index(score)
        for r in range(rep):
            i = j * rep + r
            sl = slice(i * d_hd, (i + 1) * d_hd)
            w_q[:, sl] = w_q[:, sl][:, idx]
        sl = slice(j * d_hd, (j + 1) * d_hd)
        w_k[:, sl] = w_k[:, sl][:, idx]
        records.append(SortRecord(target="attn.qk", kind=PERMUTE_QK, indices=idx,
                                  head=j, per_head=True))
    return dataclasses.replace(w, w_q=w_q, w_k=w_k), records


def sort_vo(w: AttnWeights, calib: list[CalibrationCapture], spec: BlockSpec,
            mode: str | None = None) -> tuple[AttnWeights, list[SortRecord]]:
    """Quantization-aware SVD refactorization of the value/output pair.

    mhsa mode, per head: two consecutive SVDs of C^(1/2) w_v and then
    Sigma_v V_v^T w_o give w_v' = C^(-1/2) U_v U Sigma and w_o' = V^T. The
    singular values are fused into w_v so each column shares one scale; the
    returned spectra feed the quantizer as per-column scales.

    gqa mode, per kv head: a single SVD of C w_v gives w_v' = C^(-1) U_v
    Sigma_v, and V_v^T left-multiplies every query head's w_o slice.
    """
    _require_captures(calib)
    if mode is None:
        mode = "mhsa" if spec.n_heads == spec.n_kv_heads else "gqa"
    if mode == "mhsa" and spec.n_heads != spec.n_kv_heads:
        raise ShapeError("mhsa mode requires n_heads == n_kv_heads")
    if any(c.hidden_in is None for c in calib):
        raise CalibrationError("captures lack hidden-state inputs")

    C = _mean_correlation([c.hidden_in for c in calib])
    d_hd = spec.d_head
    rep = spec.heads_per_kv
    w_v = w.w_v.copy()
    w_o = w.w_o.copy()
    records = []

    if mode == "mhsa":
        root = psd_sqrt(C)
        inv_root = inv_sqrt_psd(C)
        for j in range(spec.n_kv_heads):
            sl = slice(j * d_hd, (j + 1) * d_hd)
            U_v, s_v, Vt_v = svd(root @ w_v[:, sl])
            U2, s2, Vt2 = svd((s_v[:, None] * Vt_v) @ w_o[sl, :])
            w_v[:, sl] = inv_root @ U_v @ (U2 * s2)
            w_o[sl, :] = Vt2
            records.append(SortRecord(target="attn.vo", kind=QSVD_VO, head=j,
                                      per_head=True, sigma=s2))
    elif mode == "gqa":
        C_inv = inv_psd(C)
        for j in range(spec.n_kv_heads):
            sl = slice(j * d_hd, (j + 1) * d_hd)
            U_v, s_v, Vt_v = svd(C @ w_v[:, sl])
            w_v[:, sl] = C_inv @ (U_v * s_v)
            for r in range(rep):
                i = j * rep + r
                osl = slice(i * d_hd, (i + 1) * d_hd)
                w_o[osl, :] = Vt_v @ w_o[osl, :]
            records.append(SortRecord(target="attn.vo", kind=QSVD_VO, head=j,
                                      per_head=True, sigma=s_v))
    else:
        raise ShapeError(f"unknown mode {mode!r}")
    return dataclasses.replace(w, w_v=w_v, w_o=w_o), records


def sort_bc(w: MambaWeights, calib: list[CalibrationCapture], spec: BlockSpec
            ) -> tuple[MambaWeights, list[SortRecord]]:
    """Sort state channels of the B/C projections per SSM group.

    B is discretized by the per-head step sizes through a broadcasted outer
    product before its correlation is taken; each head's correlation-root
    norms multiply the C norms and the per-head scores are summed over the
    group. The matching conv kernels are co-permuted with the projections,
    otherwise the conv channels would decouple from their columns.
    """
    _require_captures(calib)
    if any(c.b_conv is None or c.c_conv is None or c.delta is None for c in calib):
        raise CalibrationError("captures lack B/C activations or step sizes")

    d_s = spec.d_state
    per_group = spec.heads_per_group
    w_b = w.w_b.copy()
    w_c = w.w_c.copy()
    conv_b = w.conv_b.copy()
    conv_c = w.conv_c.copy()
    records = []
    for g in range(spec.n_ssm_groups):
        sl = slice(g * d_s, (g + 1) * d_s)
        C_c = _mean_correlation([c.c_conv[:, sl] for c in calib])
        c_norm = psd_sqrt_column_norms(C_c)
        score = np.zeros(d_s)
        for tau in range(per_group):
            head = g * per_group + tau
            db = [c.delta[:, head][:, None] * c.b_conv[:, sl] for c in calib]
            dC_b = _mean_correlation(db)
            score += psd_sqrt_column_norms(dC_b) * c_norm
        idx = argsort_desc(score)
        w_b[:, sl] = w_b[:, sl][:, idx]
        w_c[:, sl] = w_c[:, sl][:, idx]
        conv_b[sl] = conv_b[sl][idx]
        conv_c[sl] = conv_c[sl][idx]
        records.append(SortRecord(target="mamba.bc", kind=PERMUTE_BC, indices=idx,
                                  head=g, per_head=True))
    return dataclasses.replace(w, w_b=w_b, w_c=w_c, conv_b=conv_b, conv_c=conv_c), records


def sort_zxo(w: MambaWeights, calib: list[CalibrationCapture], spec: BlockSpec,
             lam: float = 1.0) -> tuple[MambaWeights, list[SortRecord]]:
    """State-aware sorting of the z/x/out head channels.

    Correlations come from the flattened SSM states, not from the projection
    outputs: per head, C_H = mean over samples of H^T H with H of shape
    (T*D_s, D_hd), scored by ridge leverage. The permutation hits the z and x
    columns, the x conv kernels, and the out-projection rows of that head.
    """
    _require_captures(calib)
    if any(c.ssm_states is None for c in calib):
        raise CalibrationError("captures lack flattened SSM states")

    n_heads = spec.n_ssm_heads
    d_hd = spec.d_head
    w_z = w.w_z.copy()
    w_x = w.w_x.copy()
    w_out = w.w_out.copy()
    conv_x = w.conv_x.copy()
    records = []
    for i in range(n_heads):
        C_h = _mean_correlation([c.ssm_states[i] for c in calib])
        idx = argsort_desc(ridge_leverage(C_h, lam))
        sl = slice(i * d_hd, (i + 1) * d_hd)
        w_z[:, sl] = w_z[:, sl][:, idx]
        w_x[:, sl] = w_x[:, sl][:, idx]
        conv_x[sl] = conv_x[sl][idx]
        w_out[sl, :] = w_out[sl, :][idx, :]
        records.append(SortRecord(target="mamba.zxo", kind=PERMUTE_ZXO, indices=idx,
                                  head=i, per_head=True))
    return dataclasses.replace(w, w_z=w_z, w_x=w_x, w_out=w_out, conv_x=conv_x), records
