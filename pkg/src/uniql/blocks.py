"""Desk-scale forward passes for MLP, attention (MHSA/GQA), and Mamba2 blocks.

Each forward both produces the block output and, when asked, captures the
intermediate activations the sorting passes need. All passes are pure; a
capture object is thread-local to its call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .validation import check_matrix, check_same_shape


@dataclass(frozen=True)
class BlockSpec:
    """Architecture dimensions and head/group counts for one block."""

    d_hidden: int = 64
    d_head: int = 16
    d_intermediate: int = 128
    d_state: int = 16
    n_heads: int = 4
    n_kv_heads: int = 2
    n_ssm_heads: int = 4
    n_ssm_groups: int = 2
    conv_width: int = 4

    def __post_init__(self) -> None:
        if self.n_heads % self.n_kv_heads:
            raise ShapeError("n_heads must be divisible by n_kv_heads")
        if self.n_ssm_heads % self.n_ssm_groups:
            raise ShapeError("n_ssm_heads must be divisible by n_ssm_groups")
        if self.d_head % 2:
            raise ShapeError("d_head must be even (rotary half-split)")

    @property
    def heads_per_kv(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def heads_per_group(self) -> int:
        return self.n_ssm_heads // self.n_ssm_groups


def toy_block_spec() -> BlockSpec:
    """Default desk-scale test spec; every divisibility invariant holds."""
    return BlockSpec()


@dataclass
class MlpWeights:
    w_up: np.ndarray    # (D_h, D_int)
    w_gate: np.ndarray  # (D_h, D_int)
    w_down: np.ndarray  # (D_int, D_h)


@dataclass
class AttnWeights:
    w_q: np.ndarray  # (D_h, H_s * D_hd)
    w_k: np.ndarray  # (D_h, H_kv * D_hd)
    w_v: np.ndarray  # (D_h, H_kv * D_hd)
    w_o: np.ndarray  # (H_s * D_hd, D_h)
    rope_theta: float = 10000.0


@dataclass
class MambaWeights:
    w_z: np.ndarray      # (D_h, H_m * D_hd)
    w_x: np.ndarray      # (D_h, H_m * D_hd)
    w_b: np.ndarray      # (D_h, G_s * D_s)
    w_c: np.ndarray      # (D_h, G_s * D_s)
    w_dt: np.ndarray     # (D_h, H_m), held fixed (never sorted or pruned)
    w_out: np.ndarray    # (H_m * D_hd, D_h)
    a_log: np.ndarray    # (H_m,), per-head A = -exp(a_log)
    dt_bias: np.ndarray  # (H_m,)
    conv_x: np.ndarray   # (H_m * D_hd, k) depthwise causal kernels
    conv_b: np.ndarray   # (G_s * D_s, k)
    conv_c: np.ndarray   # (G_s * D_s, k)


@dataclass
class MambaState:
    """Carried state for chunked evaluation: SSM states plus conv context."""

    ssm: np.ndarray          # (H_m, D_s, D_hd)
    conv_x_tail: np.ndarray  # (k-1, H_m * D_hd) trailing pre-conv inputs
    conv_b_tail: np.ndarray  # (k-1, G_s * D_s)
    conv_c_tail: np.ndarray  # (k-1, G_s * D_s)


@dataclass
class CalibrationCapture:
    """Per-block activations captured during a calibration forward pass."""

    hidden_in: np.ndarray | None = None            # (T, D_h)
    mlp_intermediate: np.ndarray | None = None     # (T, D_int)
    q_rope: list[np.ndarray] | None = None         # per query head (T, D_hd)
    k_rope: list[np.ndarray] | None = None         # per kv head (T, D_hd)
    attn_o_input: np.ndarray | None = None         # (T, H_s * D_hd)
    delta: np.ndarray | None = None                # (T, H_m), post-softplus
    b_conv: np.ndarray | None = None               # (T, G_s * D_s)
    c_conv: np.ndarray | None = None               # (T, G_s * D_s)
    ssm_states: list[np.ndarray] | None = None     # per head (T * D_s, D_hd)
    mamba_out_input: np.ndarray | None = None      # (T, H_m * D_hd)
    final_state: MambaState | None = None


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable for large |x|
    return np.logaddexp(0.0, x)


def rms_norm(x: np.ndarray, scale: np.ndarray | None = None,
             eps: float = 1e-6) -> np.ndarray:
    """Row-wise RMS normalization over the last axis, optional elementwise scale."""
    rms = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    y = x / rms
    return y if scale is None else y * scale


def causal_conv(x: np.ndarray, kernels: np.ndarray,
                tail: np.ndarray | None = None) -> np.ndarray:
    """Depthwise causal 1-D convolution over time.

    ``kernels`` is (channels, k) with the last tap applied to the current
    step. ``tail`` supplies the k-1 inputs preceding x (zeros by default).
    """
    T, C = x.shape
    k = kernels.shape[1]
    if kernels.shape[0] != C:
        raise ShapeError("conv kernel channel count must match the input")
    if tail is None:
        tail = np.zeros((k - 1, C))
    padded = np.concatenate([tail, x], axis=0)
    out = np.zeros_like(x)
    for tap in range(k):
        out += padded[tap : tap + T] * kernels[:, tap]
    return out


def mlp_forward(X, w: MlpWeights, capture: bool = False
                ) -> tuple[np.ndarray, CalibrationCapture | None]:
    """Gated MLP: (silu(X w_gate) * (X w_up)) w_down."""
    X = check_matrix(X, "X")
    if X.shape[1] != w.w_up.shape[0]:
        raise ShapeError("X width does not match the MLP input dimension")
    x_int = silu(X @ w.w_gate) * (X @ w.w_up)
    Y = x_int @ w.w_down
    cap = None
    if capture:
        cap = CalibrationCapture(hidden_in=X.copy(), mlp_intermediate=x_int.copy())
    return Y, cap


def rope_apply(X, position_offset: int = 0, theta_base: float = 10000.0,
               gather=None, base_dim: int | None = None) -> np.ndarray:
    """Rotary embedding on half-split channel pairs (j, j + D/2).

    Pair j rotates by angle pos * theta_base^(-2 f_j / base_dim) where f_j is
    j, or gather[j] when a gather index is given. Sorting permutes pairs, and
    gathering the angles through the same permutation keeps
    rope_apply(X S, gather=pi) == rope_apply(X) S. For pruned heads,
    ``base_dim`` pins the exponent to the unpruned head width.
    """
    X = check_matrix(X, "X")
    T, D = X.shape
    if D % 2:
        raise ShapeError("rotary embedding needs an even channel count")
    half = D // 2
    if base_dim is None:
        base_dim = D
    freq_idx = np.arange(half, dtype=np.float64) if gather is None else (
        np.asarray(gather, dtype=np.float64))
    if freq_idx.shape[0] != half:
        raise ShapeError("gather length must equal half the channel count")
    inv_freq = theta_base ** (-2.0 * freq_idx / base_dim)
    ang = (np.arange(T, dtype=np.float64) + position_offset)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = X[:, :half], X[:, half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attn_forward(X, w: AttnWeights, spec: BlockSpec,
                 gather_per_kv_head: list[np.ndarray] | None = None,
                 capture: bool = False, position_offset: int = 0
                 ) -> tuple[np.ndarray, CalibrationCapture | None]:
    """Causal multi-head attention with rotary q/k and grouped kv heads.

    Query head i shares the kv head i // (H_s/H_kv). Softmax scale is
    1/sqrt(current head width). When per-kv-head gather indices are given
    (sorted weights), the rotary angles are gathered accordingly.
    """
    X = check_matrix(X, "X")
    T = X.shape[0]
    d_hd = w.w_q.shape[1] // spec.n_heads
    if w.w_k.shape[1] // spec.n_kv_heads != d_hd:
        raise ShapeError("query and key head widths differ")
    # pruning can leave the value/output head width different from q/k
    d_v = w.w_v.shape[1] // spec.n_kv_heads
    rep = spec.heads_per_kv
    mask = np.tril(np.ones((T, T), dtype=bool))

    q_all = X @ w.w_q
    k_all = X @ w.w_k
    v_all = X @ w.w_v

    q_rope: list[np.ndarray] = []
    k_rope: list[np.ndarray] = []
    head_outs: list[np.ndarray] = []
    for j in range(spec.n_kv_heads):
        gather = None if gather_per_kv_head is None else gather_per_kv_head[j]
        k_j = rope_apply(k_all[:, j * d_hd : (j + 1) * d_hd], position_offset,
                         w.rope_theta, gather, base_dim=spec.d_head)
        k_rope.append(k_j)
        v_j = v_all[:, j * d_v : (j + 1) * d_v]
        for r in range(rep):
            i = j * rep + r
            q_i = rope_apply(q_all[:, i * d_hd : (i + 1) * d_hd], position_offset,
                             w.rope_theta, gather, base_dim=spec.d_head)
            q_rope.append(q_i)
            scores = (q_i @ k_j.T) / np.sqrt(d_hd)
            scores = np.where(mask, scores, -np.inf)
            head_outs.append(_softmax(scores) @ v_j)

    o_input = np.concatenate(head_outs, axis=1)
    Y = o_input @ w.w_o
    cap = None
    if capture:
        cap = CalibrationCapture(hidden_in=X.copy(), q_rope=q_rope, k_rope=k_rope,
                                 attn_o_input=o_input)
    return Y, cap


def mamba_forward(X, w: MambaWeights, spec: BlockSpec, capture: bool = False,
                  state: MambaState | None = None
                  ) -> tuple[np.ndarray, CalibrationCapture | None]:
    """Mamba2-style block: gated selective state space over per-head scalars.

    Per head i in group g, with phi = causal conv + silu:
        x = phi(X w_x^i), B = phi(X w_b^g), C = phi(X w_c^g)
        delta_t = softplus((X w_dt)_i + dt_bias_i), A_i = -exp(a_log_i)
        h_t = exp(delta_t A_i) h_(t-1) + delta_t (B_t outer x_t)
        y_t = C_t h_t
    then y is gated by silu(X w_z^i), RMS-normalized per head, and projected
    by the head's rows of w_out. Initial state is zero unless ``state``
    carries a chunk boundary.
    """
    X = check_matrix(X, "X")
    T = X.shape[0]
    n_heads = w.a_log.shape[0]
    d_hd = w.w_x.shape[1] // n_heads
    d_s = w.w_b.shape[1] // spec.n_ssm_groups
    per_group = spec.heads_per_group

    x_pre = X @ w.w_x
    b_pre = X @ w.w_b
    c_pre = X @ w.w_c
    if state is None:
        x_act = silu(causal_conv(x_pre, w.conv_x))
        b_act = silu(causal_conv(b_pre, w.conv_b))
        c_act = silu(causal_conv(c_pre, w.conv_c))
        h0 = np.zeros((n_heads, d_s, d_hd))
    else:
        x_act = silu(causal_conv(x_pre, w.conv_x, tail=state.conv_x_tail))
        b_act = silu(causal_conv(b_pre, w.conv_b, tail=state.conv_b_tail))
        c_act = silu(causal_conv(c_pre, w.conv_c, tail=state.conv_c_tail))
        h0 = state.ssm

    delta = softplus(X @ w.w_dt + w.dt_bias)  # (T, H_m)
    a = -np.exp(w.a_log)
    z_all = X @ w.w_z

    Y = np.zeros((T, w.w_out.shape[1]))
    ssm_states: list[np.ndarray] = []
    final = np.empty_like(h0)
    out_input = np.empty((T, n_heads * d_hd))
    for i in range(n_heads):
        g = i // per_group
        B = b_act[:, g * d_s : (g + 1) * d_s]
        C = c_act[:, g * d_s : (g + 1) * d_s]
        xh = x_act[:, i * d_hd : (i + 1) * d_hd]
        h = h0[i].copy()
        y = np.empty((T, d_hd))
        states = np.empty((T, d_s, d_hd)) if capture else None
        for t in range(T):
            dt = delta[t, i]
            h = np.exp(dt * a[i]) * h + dt * np.outer(B[t], xh[t])
            y[t] = C[t] @ h
            if states is not None:
                states[t] = h
        final[i] = h
        if states is not None:
            ssm_states.append(states.reshape(T * d_s, d_hd))
        gated = rms_norm(silu(z_all[:, i * d_hd : (i + 1) * d_hd]) * y)
        out_input[:, i * d_hd : (i + 1) * d_hd] = gated
        Y += gated @ w.w_out[i * d_hd : (i + 1) * d_hd]

    cap = None
    if capture:
        k = w.conv_x.shape[1]

        def tail(prev: np.ndarray | None, pre: np.ndarray) -> np.ndarray:
            if prev is None:
                prev = np.zeros((k - 1, pre.shape[1]))
            return np.concatenate([prev, pre], axis=0)[-(k - 1):].copy()

        prev_x, prev_b, prev_c = (
            (None, None, None) if state is None
            else (state.conv_x_tail, state.conv_b_tail, state.conv_c_tail))
        cap = CalibrationCapture(
            hidden_in=X.copy(),
            delta=delta,
            b_conv=b_act,
            c_conv=c_act,
            ssm_states=ssm_states,
            mamba_out_input=out_input,
            final_state=MambaState(
                ssm=final,
                conv_x_tail=tail(prev_x, x_pre),
                conv_b_tail=tail(prev_b, b_pre),
                conv_c_tail=tail(prev_c, c_pre),
            ),
        )
    return Y, cap


def block_io_record(x_in, y_out) -> tuple[np.ndarray, np.ndarray]:
    """Pair a block's input and output rows for influence scoring."""
    x_in = check_matrix(x_in, "x_in")
    y_out = check_matrix(y_out, "y_out")
    check_same_shape(x_in, y_out, "block input/output")
    return x_in, y_out
