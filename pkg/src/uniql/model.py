"""Desk-scale language model container: token embedding, a stack of pre-norm
residual blocks (MLP / attention / Mamba, freely mixed), and a logit head.

This is the shape the compressor consumes and the artifact container
serializes; it has no training mode and evaluates one sequence at a time.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    AttnWeights,
    BlockSpec,
    CalibrationCapture,
    MambaWeights,
    MlpWeights,
    attn_forward,
    block_io_record,
    mamba_forward,
    mlp_forward,
    rms_norm,
)
from .errors import ShapeError
from .quantizer import (
    FusionConfig,
    fuse_norm,
    hadamard_matrix,
    rotate_reader,
    rotate_writer,
)
from .validation import check_matrix

MLP = "mlp"
ATTN = "attn"
MAMBA = "mamba"


@dataclass
class Layer:
    kind: str
    spec: BlockSpec
    weights: MlpWeights | AttnWeights | MambaWeights
    norm_scale: np.ndarray | None = None  # None once fused
    qk_gather: list[np.ndarray] | None = None  # per kv head, post-sort


@dataclass
class Model:
    embedding: np.ndarray            # (vocab, D_h)
    layers: list[Layer]
    logit_weight: np.ndarray         # (D_h, vocab)
    final_norm_scale: np.ndarray | None = None
    norm_fused: bool = False
    hadamard_applied: bool = False

    @property
    def d_hidden(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class ForwardTrace:
    """Everything a calibration pass records: per-layer block captures,
    residual-stream input/output pairs for influence scoring, and the
    post-norm final hidden states feeding the logit head."""

    captures: list[CalibrationCapture] = field(default_factory=list)
    io_pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    final_hidden: np.ndarray | None = None


def _block_forward(layer: Layer, x: np.ndarray, capture: bool):
    if layer.kind == MLP:
        return mlp_forward(x, layer.weights, capture=capture)
    if layer.kind == ATTN:
        return attn_forward(x, layer.weights, layer.spec,
                            gather_per_kv_head=layer.qk_gather, capture=capture)
    if layer.kind == MAMBA:
        return mamba_forward(x, layer.weights, layer.spec, capture=capture)
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def model_forward(model: Model, tokens, capture: bool = False
                  ) -> tuple[np.ndarray, ForwardTrace | None]:
    """Run one token sequence; returns (logits, trace-if-captured)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ShapeError("tokens must be a 1-D integer sequence")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= model.vocab_size:
        raise ShapeError("token id out of vocabulary range")
    x = model.embedding[tokens]
    trace = ForwardTrace() if capture else None
    for layer in model.layers:
        normed = rms_norm(x, layer.norm_scale)
        y, cap = _block_forward(layer, normed, capture)
        x_out = x + y
        if trace is not None:
            trace.captures.append(cap)
            trace.io_pairs.append(block_io_record(x.copy(), x_out.copy()))
        x = x_out
    final = rms_norm(x, model.final_norm_scale)
    if trace is not None:
        trace.final_hidden = final
    return final @ model.logit_weight, trace


def fuse_model_norms(model: Model) -> Model:
    """Fold every RMSNorm scale into the weights reading it (in place)."""
    for layer in model.layers:
        if layer.norm_scale is None:
            continue
        gamma = layer.norm_scale
        w = layer.weights
        if layer.kind == MLP:
            w.w_up, w.w_gate = fuse_norm(gamma, [w.w_up, w.w_gate])
        elif layer.kind == ATTN:
            w.w_q, w.w_k, w.w_v = fuse_norm(gamma, [w.w_q, w.w_k, w.w_v])
        elif layer.kind == MAMBA:
            w.w_z, w.w_x, w.w_b, w.w_c, w.w_dt = fuse_norm(
                gamma, [w.w_z, w.w_x, w.w_b, w.w_c, w.w_dt])
        layer.norm_scale = None
    if model.final_norm_scale is not None:
        (model.logit_weight,) = fuse_norm(model.final_norm_scale, [model.logit_weight])
        model.final_norm_scale = None
    model.norm_fused = True
    return model


_LAYER_READERS = {
    MLP: ("w_up", "w_gate"),
    ATTN: ("w_q", "w_k", "w_v"),
    MAMBA: ("w_z", "w_x", "w_b", "w_c", "w_dt"),
}
_LAYER_WRITERS = {MLP: ("w_down",), ATTN: ("w_o",), MAMBA: ("w_out",)}


def hadamard_fuse(model: Model, config: FusionConfig | None = None) -> Model:
    """Rotate the residual stream by an orthonormal Hadamard matrix (in place).

    Readers of the stream absorb H^T on their rows, writers absorb H on their
    columns, per the config's operator flags; weights whose stream-facing
    side is a prunable dimension are untouched so channel slicing stays
    valid. With every flag false the weights are returned bit-identical.
    Requires fused (scale-free) norms, which commute with the rotation.
    """
    config = config or FusionConfig.default()
    if not config.any_hadamard:
        return model
    if not model.norm_fused:
        raise ShapeError("fuse norms before applying the Hadamard rotation")
    H = hadamard_matrix(model.d_hidden)
    if config.rotates("embedding"):
        model.embedding = rotate_writer(model.embedding, H)
    if config.rotates("logit_weight"):
        model.logit_weight = rotate_reader(model.logit_weight, H)
    for layer in model.layers:
        w = layer.weights
        for name in _LAYER_READERS[layer.kind]:
            if config.rotates(name):
                setattr(w, name, rotate_reader(getattr(w, name), H))
        for name in _LAYER_WRITERS[layer.kind]:
            if config.rotates(name):
                setattr(w, name, rotate_writer(getattr(w, name), H))
    model.hadamard_applied = True
    return model


def _init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.standard_normal((rows, cols)) / np.sqrt(rows)


def build_toy_layer(kind: str, spec: BlockSpec, rng: np.random.Generator,
                    rope_theta: float = 10000.0) -> Layer:
    d_h, d_hd, d_int = spec.d_hidden, spec.d_head, spec.d_intermediate
    if kind == MLP:
        weights = MlpWeights(
            w_up=_init(rng, d_h, d_int),
            w_gate=_init(rng, d_h, d_int),
            w_down=_init(rng, d_int, d_h),
        )
    elif kind == ATTN:
        weights = AttnWeights(
            w_q=_init(rng, d_h, spec.n_heads * d_hd),
            w_k=_init(rng, d_h, spec.n_kv_heads * d_hd),
            w_v=_init(rng, d_h, spec.n_kv_heads * d_hd),
            w_o=_init(rng, spec.n_heads * d_hd, d_h),
            rope_theta=rope_theta,
        )
    elif kind == MAMBA:
        h_m, g_s, d_s, k = spec.n_ssm_heads, spec.n_ssm_groups, spec.d_state, spec.conv_width
        weights = MambaWeights(
            w_z=_init(rng, d_h, h_m * d_hd),
            w_x=_init(rng, d_h, h_m * d_hd),
            w_b=_init(rng, d_h, g_s * d_s),
            w_c=_init(rng, d_h, g_s * d_s),
            w_dt=_init(rng, d_h, h_m),
            w_out=_init(rng, h_m * d_hd, d_h),
            a_log=rng.uniform(-1.0, 1.0, h_m),
            dt_bias=rng.uniform(-0.5, 0.5, h_m),
            conv_x=rng.standard_normal((h_m * d_hd, k)) / np.sqrt(k),
            conv_b=rng.standard_normal((g_s * d_s, k)) / np.sqrt(k),
            conv_c=rng.standard_normal((g_s * d_s, k)) / np.sqrt(k),
        )
    else:
        raise ShapeError(f"unknown layer kind {kind!r}")
    gamma = 1.0 + 0.1 * rng.standard_normal(d_h)
    return Layer(kind=kind, spec=spec, weights=weights, norm_scale=gamma)


def build_toy_model(layout, spec: BlockSpec | None = None, vocab_size: int = 256,
                    seed: int = 0, rope_theta: float = 10000.0) -> Model:
    """Random desk-scale model with the given layer layout, e.g.
    ("attn", "mlp", "mamba", "mlp")."""
    spec = spec or BlockSpec()
    rng = np.random.default_rng(seed)
    embedding = rng.standard_normal((vocab_size, spec.d_hidden))
    layers = [build_toy_layer(kind, spec, rng, rope_theta) for kind in layout]
    logit_weight = _init(rng, spec.d_hidden, vocab_size)
    final_gamma = 1.0 + 0.1 * rng.standard_normal(spec.d_hidden)
    return Model(embedding=embedding, layers=layers, logit_weight=logit_weight,
                 final_norm_scale=final_gamma)


def check_model(model: Model) -> Model:
    """Validate tensor shapes against each layer's spec."""
    d_h = model.d_hidden
    check_matrix(model.embedding, "embedding")
    check_matrix(model.logit_weight, "logit_weight")
    if model.logit_weight.shape[0] != d_h:
        raise ShapeError("logit head must read the hidden dimension")
    for i, layer in enumerate(model.layers):
        w = layer.weights
        for name in _LAYER_READERS[layer.kind]:
            if getattr(w, name).shape[0] != d_h:
                raise ShapeError(f"layer {i}: {name} rows != d_hidden")
        for name in _LAYER_WRITERS[layer.kind]:
            if getattr(w, name).shape[1] != d_h:
                raise ShapeError(f"layer {i}: {name} cols != d_hidden")
    return model
