"""End-to-end orchestration: one compress pass (fuse, calibrate, sort,
allocate, quantize, serialize) and the device-side prune/evaluate path.

compress is called once; every configured pruning rate afterwards is a
metadata-driven slice of the packed artifact, with no calibration data or
recomputation involved.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax
from sklearn.base import BaseEstimator

from . import artifact as artifact_io
from .allocation import (
    PAIRED,
    PLAIN,
    PruningPlan,
    allocate_rates,
    block_influence,
    kept_channels,
    sample_mask,
)
from .artifact import CalibrationSet, ModelArtifact
from .blocks import BlockSpec
from .errors import ArtifactError, CalibrationError, ShapeError, UnsupportedRateError
from .linalg import CorrelationStats, accumulate_correlation
from .model import (
    ATTN,
    MAMBA,
    MLP,
    Model,
    check_model,
    fuse_model_norms,
    hadamard_fuse,
    model_forward,
)
from .packing import QuantizedTensor, select_columns, select_rows
from .quantizer import FusionConfig, gptq_compensate, quantize_group_sym
from .sorting import QSVD_VO, SortRecord, sort_bc, sort_mlp, sort_qk, sort_vo, sort_zxo

log = logging.getLogger(__name__)

FLOAT_BITS = (16, 32)


@dataclass
class CompressionConfig:
    """Knobs for one compression run. bits 16/32 skip quantization and
    produce a float artifact (sorted and fused but not packed)."""

    rates: tuple[float, ...] = (0.15, 0.25, 0.35)
    bits: int = 4
    group_size: int = 128
    epsilon: float = 0.1
    ridge_lambda: float = 1.0
    rate_cap: float = 0.9
    gptq_damp: float = 0.01
    hadamard: bool = True
    fuse_norms: bool = True
    seed: int = 0


def _mask_dims(layer_kind: str, spec: BlockSpec):
    if layer_kind == MLP:
        return [("mlp_intermediate", spec.d_intermediate, PLAIN)]
    if layer_kind == ATTN:
        return [("attn_qk", spec.d_head, PAIRED), ("attn_vo", spec.d_head, PLAIN)]
    if layer_kind == MAMBA:
        return [("mamba_head", spec.d_head, PLAIN), ("mamba_state", spec.d_state, PLAIN)]
    raise ShapeError(f"unknown layer kind {layer_kind!r}")


def _sort_layer(layer, caps, config) -> list[SortRecord]:
    if layer.kind == MLP:
        layer.weights, rec = sort_mlp(layer.weights, caps, config.ridge_lambda)
        return [rec]
    if layer.kind == ATTN:
        layer.weights, qk_recs = sort_qk(layer.weights, caps, layer.spec)
        layer.weights, vo_recs = sort_vo(layer.weights, caps, layer.spec)
        layer.qk_gather = [r.rope_gather for r in qk_recs]
        return qk_recs + vo_recs
    if layer.kind == MAMBA:
        layer.weights, bc_recs = sort_bc(layer.weights, caps, layer.spec)
        layer.weights, zxo_recs = sort_zxo(layer.weights, caps, layer.spec,
                                           config.ridge_lambda)
        return bc_recs + zxo_recs
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def _vo_sigma(records: list[SortRecord]) -> np.ndarray | None:
    sigmas = [r.sigma for r in records if r.kind == QSVD_VO]
    return np.concatenate(sigmas) if sigmas else None


def _unscale_columns(W: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sigma > 0.0, W / sigma, 0.0)
    return out


def compress(model: Model, calib: CalibrationSet, config: CompressionConfig | None = None,
             mask_hook=None, mask_steps: int = 0) -> ModelArtifact:
    """One-pass compression of a float model.

    Fuses norms and (optionally) the Hadamard rotation, runs the calibration
    forwards once to capture activations and layer influence, sorts every
    block, allocates per-layer rates for every configured global rate, then
    quantizes with error compensation and serializes. The zero-prune
    equivalence residual of the sorted float model is logged as a self-check
    and stored in the manifest.

    ``mask_hook(step, rate, masks_per_layer)``, when given, receives
    ``mask_steps`` seeded draws of per-layer channel masks, the hook an
    external masked trainer would plug into.
    """
    config = config or CompressionConfig()
    if not calib.sequences:
        raise CalibrationError("empty calibration set")
    fusion = (FusionConfig.default() if config.hadamard
              else FusionConfig.no_hadamard())
    fusion = dataclasses.replace(fusion, norm_fusion=config.fuse_norms)
    model = check_model(model).copy()
    if fusion.norm_fusion:
        fuse_model_norms(model)
    hadamard_fuse(model, fusion)

    # capture pass on the fused model
    traces = []
    ref_logits = []
    for seq in calib.sequences:
        logits, tr = model_forward(model, seq, capture=True)
        traces.append(tr)
        ref_logits.append(logits)

    # layer influence -> per-layer rates for every configured global rate
    n_layers = len(model.layers)
    scores = np.empty(n_layers)
    for l in range(n_layers):
        x_rows = np.concatenate([t.io_pairs[l][0] for t in traces], axis=0)
        y_rows = np.concatenate([t.io_pairs[l][1] for t in traces], axis=0)
        scores[l] = block_influence(x_rows, y_rows)
    plan = PruningPlan(global_rates=[float(r) for r in config.rates],
                       epsilon=config.epsilon)
    for r in plan.global_rates:
        plan.per_layer[r] = allocate_rates(scores, r, config.epsilon, config.rate_cap)

    # structured sorting, layer by layer
    records: list[list[SortRecord]] = []
    for l, layer in enumerate(model.layers):
        caps = [t.captures[l] for t in traces]
        records.append(_sort_layer(layer, caps, config))

    # zero-prune equivalence self-check on the sorted model
    resid = 0.0
    for seq, ref in zip(calib.sequences, ref_logits):
        logits, _ = model_forward(model, seq)
        resid = max(resid, float(np.linalg.norm(logits - ref) / np.linalg.norm(ref)))
    log.info("zero-prune equivalence residual: %.3e", resid)

    if mask_hook is not None:
        for step in range(mask_steps):
            masks = {}
            drawn = None
            for l, layer in enumerate(model.layers):
                drawn, masks[l] = sample_mask(plan, l, _mask_dims(layer.kind, layer.spec),
                                              rng_seed=config.seed + step)
            mask_hook(step, drawn, masks)

    extra = {
        "fusion_config": {
            "norm_fusion": fusion.norm_fusion,
            "input_hadamard": fusion.input_hadamard,
            "output_hadamard": fusion.output_hadamard,
        },
        "bits": config.bits,
        "group_size": config.group_size,
        "epsilon": config.epsilon,
        "ridge_lambda": config.ridge_lambda,
        "seed": config.seed,
        "influence_scores": [float(s) for s in scores],
        "sort_residual": resid,
    }
    if config.bits in FLOAT_BITS:
        dtype = "float16" if config.bits == 16 else "float32"
        return artifact_io.model_to_artifact(model, dtype=dtype,
                                             sort_records=records, plan=plan, extra=extra)
    return _quantize_model(model, records, plan, config, calib, extra)


def _quantize_model(model: Model, records, plan, config, calib, extra) -> ModelArtifact:
    """Second capture pass over the sorted model for the compensation
    Hessians, then group-quantize every projection."""
    d_h = model.d_hidden
    hidden = [CorrelationStats(d_h) for _ in model.layers]
    inner = []
    for layer in model.layers:
        if layer.kind == MLP:
            dim = layer.spec.d_intermediate
        elif layer.kind == ATTN:
            dim = layer.weights.w_o.shape[0]
        else:
            dim = layer.weights.w_out.shape[0]
        inner.append(CorrelationStats(dim))
    final_stats = CorrelationStats(d_h)
    for seq in calib.sequences:
        _, tr = model_forward(model, seq, capture=True)
        for l, layer in enumerate(model.layers):
            cap = tr.captures[l]
            accumulate_correlation(hidden[l], cap.hidden_in)
            inner_act = {
                MLP: cap.mlp_intermediate,
                ATTN: cap.attn_o_input,
                MAMBA: cap.mamba_out_input,
            }[layer.kind]
            accumulate_correlation(inner[l], inner_act)
        accumulate_correlation(final_stats, tr.final_hidden)

    tensors: dict[str, np.ndarray | QuantizedTensor] = {}
    entries: list[dict] = []

    def add_q(name: str, W: np.ndarray, stats: CorrelationStats | None,
              column_scale: np.ndarray | None = None) -> None:
        if stats is None:
            q = quantize_group_sym(W, config.bits, config.group_size, column_scale)
        else:
            q, objective = gptq_compensate(W, stats, config.bits, config.group_size,
                                           config.gptq_damp, column_scale)
            log.debug("gptq objective for %s: %.6e", name, objective)
        tensors[name] = q
        entries.append({"name": name, "format": "q", "shape": [q.rows, q.cols],
                        "column_scaled": column_scale is not None})

    def add_f(name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=np.float64)
        tensors[name] = arr
        entries.append({"name": name, "format": "f32", "shape": list(arr.shape)})

    add_q("embedding", model.embedding, None)
    add_q("logit_weight", model.logit_weight, final_stats)
    if model.final_norm_scale is not None:
        add_f("final_norm_scale", model.final_norm_scale)
    layer_entries = []
    for l, layer in enumerate(model.layers):
        w = layer.weights
        if layer.norm_scale is not None:
            add_f(f"layers.{l}.norm_scale", layer.norm_scale)
        if layer.kind == MLP:
            add_q(f"layers.{l}.w_up", w.w_up, hidden[l])
            add_q(f"layers.{l}.w_gate", w.w_gate, hidden[l])
            add_q(f"layers.{l}.w_down", w.w_down, inner[l])
        elif layer.kind == ATTN:
            add_q(f"layers.{l}.w_q", w.w_q, hidden[l])
            add_q(f"layers.{l}.w_k", w.w_k, hidden[l])
            sigma = _vo_sigma(records[l])
            add_q(f"layers.{l}.w_v", _unscale_columns(w.w_v, sigma), hidden[l],
                  column_scale=sigma)
            add_q(f"layers.{l}.w_o", w.w_o, inner[l])
        elif layer.kind == MAMBA:
            for name in ("w_z", "w_x", "w_b", "w_c", "w_dt"):
                add_q(f"layers.{l}.{name}", getattr(w, name), hidden[l])
            add_q(f"layers.{l}.w_out", w.w_out, inner[l])
            for name in ("a_log", "dt_bias", "conv_x", "conv_b", "conv_c"):
                add_f(f"layers.{l}.{name}", getattr(w, name))
        layer_entries.append({
            "kind": layer.kind,
            "spec": artifact_io._spec_to_dict(layer.spec),
            "rope_theta": getattr(w, "rope_theta", None),
            "has_norm_scale": layer.norm_scale is not None,
            "qk_gather": None if layer.qk_gather is None
            else [[int(x) for x in g] for g in layer.qk_gather],
            "sort_records": [artifact_io._record_to_dict(r) for r in records[l]],
        })

    manifest = {
        "format_version": artifact_io.FORMAT_VERSION,
        "kind": f"int{config.bits}",
        "vocab_size": model.vocab_size,
        "d_hidden": d_h,
        "fusion": {"norm_fused": model.norm_fused, "hadamard": model.hadamard_applied},
        "layers": layer_entries,
        "pruning_plan": artifact_io.plan_to_manifest(plan),
        "pruned_rate": None,
        "tensors": entries,
    }
    manifest.update(extra)
    return ModelArtifact(manifest=manifest, tensors=tensors)


# --- device-side pruning -----------------------------------------------------

def _take_cols(t, idx: np.ndarray):
    if isinstance(t, QuantizedTensor):
        return select_columns(t, idx)
    return np.ascontiguousarray(np.asarray(t)[:, idx])


def _take_rows(t, idx: np.ndarray):
    if isinstance(t, QuantizedTensor):
        return select_rows(t, idx)
    return np.ascontiguousarray(np.asarray(t)[idx, :])


def _per_head_prefix(n_heads: int, width: int, keep: int) -> np.ndarray:
    return np.concatenate([np.arange(keep) + h * width for h in range(n_heads)])


def _paired_prefix(n_heads: int, width: int, keep_pairs: int) -> np.ndarray:
    half = width // 2
    per_head = np.concatenate([np.arange(keep_pairs), half + np.arange(keep_pairs)])
    return np.concatenate([per_head + h * width for h in range(n_heads)])


def _layer_rates_for(art: ModelArtifact, rate: float) -> np.ndarray:
    n_layers = len(art.manifest["layers"])
    if abs(rate) <= 1e-9:
        return np.zeros(n_layers)
    if art.manifest.get("pruned_rate") is not None:
        raise UnsupportedRateError("artifact is already pruned; only rate 0 is valid")
    plan = art.pruning_plan
    if plan is None:
        raise UnsupportedRateError("artifact carries no pruning plan")
    try:
        return plan.rates_for(rate)
    except KeyError:
        raise UnsupportedRateError(
            f"unsupported rate {rate}; plan covers {plan.global_rates}") from None


def prune_artifact(art: ModelArtifact, rate: float) -> ModelArtifact:
    """Slice a compressed artifact down to one configured global rate.

    Packed tensors are unpacked, sliced along their sorted channels, and
    repacked; scales and rotary gather indices are sliced in lockstep. The
    hidden dimension never changes. The result carries no plan of its own:
    pruning is a one-way step off the one-pass artifact.
    """
    layer_rates = _layer_rates_for(art, rate)
    man = {k: v for k, v in art.manifest.items()}
    man["layers"] = [dict(e) for e in art.manifest["layers"]]
    man["tensors"] = [dict(e) for e in art.manifest["tensors"]]
    entry_by_name = {e["name"]: e for e in man["tensors"]}
    tensors: dict[str, np.ndarray | QuantizedTensor] = dict(art.tensors)

    def replace(name: str, value) -> None:
        tensors[name] = value
        shape = ([value.rows, value.cols] if isinstance(value, QuantizedTensor)
                 else list(value.shape))
        entry_by_name[name]["shape"] = shape

    for l, entry in enumerate(man["layers"]):
        r = float(layer_rates[l])
        spec = artifact_io._spec_from_dict(entry["spec"])
        kind = entry["kind"]
        pre = f"layers.{l}."
        if kind == MLP:
            keep = kept_channels(spec.d_intermediate, r)
            if keep == spec.d_intermediate:
                continue
            cols = np.arange(keep)
            replace(pre + "w_up", _take_cols(tensors[pre + "w_up"], cols))
            replace(pre + "w_gate", _take_cols(tensors[pre + "w_gate"], cols))
            replace(pre + "w_down", _take_rows(tensors[pre + "w_down"], cols))
        elif kind == ATTN:
            keep_qk = kept_channels(spec.d_head, r, paired=True)
            keep_vo = kept_channels(spec.d_head, r)
            if keep_qk == spec.d_head and keep_vo == spec.d_head:
                continue
            p = keep_qk // 2
            replace(pre + "w_q",
                    _take_cols(tensors[pre + "w_q"],
                               _paired_prefix(spec.n_heads, spec.d_head, p)))
            replace(pre + "w_k",
                    _take_cols(tensors[pre + "w_k"],
                               _paired_prefix(spec.n_kv_heads, spec.d_head, p)))
            replace(pre + "w_v",
                    _take_cols(tensors[pre + "w_v"],
                               _per_head_prefix(spec.n_kv_heads, spec.d_head, keep_vo)))
            replace(pre + "w_o",
                    _take_rows(tensors[pre + "w_o"],
                               _per_head_prefix(spec.n_heads, spec.d_head, keep_vo)))
            if entry.get("qk_gather") is not None:
                entry["qk_gather"] = [g[:p] for g in entry["qk_gather"]]
        elif kind == MAMBA:
            keep_hd = kept_channels(spec.d_head, r)
            keep_s = kept_channels(spec.d_state, r)
            if keep_hd == spec.d_head and keep_s == spec.d_state:
                continue
            head_cols = _per_head_prefix(spec.n_ssm_heads, spec.d_head, keep_hd)
            state_cols = _per_head_prefix(spec.n_ssm_groups, spec.d_state, keep_s)
            replace(pre + "w_z", _take_cols(tensors[pre + "w_z"], head_cols))
            replace(pre + "w_x", _take_cols(tensors[pre + "w_x"], head_cols))
            replace(pre + "w_out", _take_rows(tensors[pre + "w_out"], head_cols))
            replace(pre + "conv_x", _take_rows(tensors[pre + "conv_x"], head_cols))
            replace(pre + "w_b", _take_cols(tensors[pre + "w_b"], state_cols))
            replace(pre + "w_c", _take_cols(tensors[pre + "w_c"], state_cols))
            replace(pre + "conv_b", _take_rows(tensors[pre + "conv_b"], state_cols))
            replace(pre + "conv_c", _take_rows(tensors[pre + "conv_c"], state_cols))
        entry["sort_records"] = None

    man["pruned_rate"] = float(rate)
    man["pruning_plan"] = None
    return ModelArtifact(manifest=man, tensors=tensors)


def deploy_prune(art: ModelArtifact, rate: float) -> Model:
    """Materialize the runnable model at one configured rate."""
    if abs(rate) <= 1e-9:
        _layer_rates_for(art, 0.0)
        return artifact_io.artifact_to_model(art)
    return artifact_io.artifact_to_model(prune_artifact(art, rate))


# --- evaluation ---------------------------------------------------------------

def evaluate(candidate, eval_set: CalibrationSet, reference) -> dict:
    """Logit MSE and KL divergence of a candidate against a reference model,
    plus the candidate's serialized size in bytes."""
    cand_art = candidate if isinstance(candidate, ModelArtifact) else None
    cand = artifact_io.artifact_to_model(candidate) if cand_art else candidate
    ref = (artifact_io.artifact_to_model(reference)
           if isinstance(reference, ModelArtifact) else reference)
    if cand.vocab_size != ref.vocab_size:
        raise ShapeError("candidate and reference vocabularies differ")
    mse_sum = 0.0
    kl_sum = 0.0
    n_tokens = 0
    for seq in eval_set.sequences:
        lc, _ = model_forward(cand, seq)
        lr, _ = model_forward(ref, seq)
        mse_sum += float(np.sum((lc - lr) ** 2))
        logp_ref = log_softmax(lr, axis=-1)
        logp_cand = log_softmax(lc, axis=-1)
        kl_sum += float(np.sum(np.exp(logp_ref) * (logp_ref - logp_cand)))
        n_tokens += seq.shape[0]
    nbytes = cand_art.nbytes() if cand_art else artifact_io.model_to_artifact(cand).nbytes()
    return {
        "logit_mse": mse_sum / (n_tokens * cand.vocab_size),
        "logit_kl": kl_sum / n_tokens,
        "artifact_bytes": nbytes,
    }


# --- estimator wrapper ---------------------------------------------------------

class UniqlCompressor(BaseEstimator):
    """Estimator-style front end: fit once on calibration data, then
    transform to any configured pruning rate.

    Parameters mirror CompressionConfig. Fitted state lives in ``artifact_``.
    """

    def __init__(self, rates=(0.15, 0.25, 0.35), bits=4, group_size=128,
                 epsilon=0.1, ridge_lambda=1.0, rate_cap=0.9, gptq_damp=0.01,
                 hadamard=True, fuse_norms=True, seed=0):
        self.rates = rates
        self.bits = bits
        self.group_size = group_size
        self.epsilon = epsilon
        self.ridge_lambda = ridge_lambda
        self.rate_cap = rate_cap
        self.gptq_damp = gptq_damp
        self.hadamard = hadamard
        self.fuse_norms = fuse_norms
        self.seed = seed

    def _config(self) -> CompressionConfig:
        return CompressionConfig(
            rates=tuple(self.rates), bits=self.bits, group_size=self.group_size,
            epsilon=self.epsilon, ridge_lambda=self.ridge_lambda,
            rate_cap=self.rate_cap, gptq_damp=self.gptq_damp,
            hadamard=self.hadamard, fuse_norms=self.fuse_norms, seed=self.seed)

    def fit(self, model: Model, calibration: CalibrationSet,
            mask_hook=None, mask_steps: int = 0) -> "UniqlCompressor":
        self.artifact_ = compress(model, calibration, self._config(),
                                  mask_hook=mask_hook, mask_steps=mask_steps)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "artifact_"):
            raise ArtifactError("compressor is not fitted; call fit first")

    def transform(self, rate: float = 0.0) -> Model:
        """Materialize the pruned in-memory model at one configured rate."""
        self._check_fitted()
        return deploy_prune(self.artifact_, rate)

    def predict(self, tokens, rate: float = 0.0) -> np.ndarray:
        """Logits of the (optionally pruned) compressed model."""
        logits, _ = model_forward(self.transform(rate), tokens)
        return logits

    def save(self, path) -> None:
        self._check_fitted()
        self.artifact_.save(path)
