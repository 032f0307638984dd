import numpy as np
import pytest

from uniql.allocation import kept_channels
from uniql.artifact import artifact_to_model, from_bytes, random_calibration
from uniql.errors import CalibrationError, UnsupportedRateError
from uniql.model import build_toy_model, model_forward
from uniql.packing import QuantizedTensor
from uniql.pipeline import (
    CompressionConfig,
    UniqlCompressor,
    compress,
    deploy_prune,
    evaluate,
    prune_artifact,
)
from uniql.quantizer import dequantize

LAYOUT = ("attn", "mlp", "mamba", "mlp")
VOCAB = 512


@pytest.fixture(scope="module")
def toy_model():
    return build_toy_model(LAYOUT, vocab_size=VOCAB, seed=21)


@pytest.fixture(scope="module")
def calib():
    return random_calibration(VOCAB, n_sequences=8, seq_len=32, seed=3)


@pytest.fixture(scope="module")
def compressed(toy_model, calib):
    return compress(toy_model, calib, CompressionConfig(seed=0))


@pytest.fixture(scope="module")
def fp_artifact(toy_model, calib):
    return compress(toy_model, calib, CompressionConfig(bits=32, seed=0))


def test_compress_records_self_check_residual(compressed):
    assert compressed.manifest["sort_residual"] < 1e-10


def test_compress_requires_calibration(toy_model):
    from uniql.artifact import CalibrationSet
    with pytest.raises(CalibrationError):
        compress(toy_model, CalibrationSet([]))


def quantization_error_budget(fp_model, q_model, tokens):
    """First-order error budget: logit deviation with each component quantized
    alone, summed over components (triangle inequality on the composition)."""
    ref, _ = model_forward(fp_model, tokens)
    budget = 0.0
    for l in range(len(fp_model.layers)):
        hybrid = fp_model.copy()
        hybrid.layers[l] = q_model.layers[l]
        out, _ = model_forward(hybrid, tokens)
        budget += np.linalg.norm(out - ref)
    for attr in ("embedding", "logit_weight"):
        hybrid = fp_model.copy()
        setattr(hybrid, attr, getattr(q_model, attr))
        out, _ = model_forward(hybrid, tokens)
        budget += np.linalg.norm(out - ref)
    return ref, budget


def test_quantized_artifact_within_per_layer_error_budget(compressed, fp_artifact, rng):
    cand = artifact_to_model(compressed)
    ref_model = artifact_to_model(fp_artifact)
    tokens = rng.integers(0, VOCAB, 24)
    ref, budget = quantization_error_budget(ref_model, cand, tokens)
    lc, _ = model_forward(cand, tokens)
    # nonlinear interaction slack on top of the first-order budget
    assert np.linalg.norm(lc - ref) <= 1.5 * budget


def test_quantize_only_plan_prunes_at_rate_zero(toy_model, calib):
    art = compress(toy_model, calib, CompressionConfig(rates=(), seed=0))
    assert art.pruning_plan.global_rates == []
    deploy_prune(art, 0.0)
    with pytest.raises(UnsupportedRateError):
        deploy_prune(art, 0.25)


def test_compress_deterministic_bytes(toy_model, calib):
    a = compress(toy_model, calib, CompressionConfig(seed=9)).to_bytes()
    b = compress(toy_model, calib, CompressionConfig(seed=9)).to_bytes()
    assert a == b


def test_fp_artifact_rate_zero_reproduces_original(toy_model, calib, fp_artifact, rng):
    model = deploy_prune(fp_artifact, 0.0)
    tokens = rng.integers(0, VOCAB, 20)
    ref, _ = model_forward(toy_model, tokens)
    got, _ = model_forward(model, tokens)
    assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)


def test_deploy_rate_zero_bit_exact(compressed, rng):
    unpruned = artifact_to_model(compressed)
    pruned = deploy_prune(compressed, 0.0)
    tokens = rng.integers(0, VOCAB, 16)
    a, _ = model_forward(unpruned, tokens)
    b, _ = model_forward(pruned, tokens)
    assert np.array_equal(a, b)


def test_unsupported_rate_rejected(compressed):
    with pytest.raises(UnsupportedRateError):
        deploy_prune(compressed, 0.4)


def test_pruned_dims_match_plan_arithmetic(compressed):
    rate = 0.25
    layer_rates = compressed.pruning_plan.rates_for(rate)
    pruned = prune_artifact(compressed, rate)
    for l, entry in enumerate(compressed.manifest["layers"]):
        r = layer_rates[l]
        spec = entry["spec"]
        if entry["kind"] == "mlp":
            keep = kept_channels(spec["d_intermediate"], r)
            assert pruned.tensors[f"layers.{l}.w_up"].cols == keep
            assert pruned.tensors[f"layers.{l}.w_down"].rows == keep
        elif entry["kind"] == "attn":
            keep_qk = kept_channels(spec["d_head"], r, paired=True)
            keep_vo = kept_channels(spec["d_head"], r)
            assert pruned.tensors[f"layers.{l}.w_q"].cols == spec["n_heads"] * keep_qk
            assert pruned.tensors[f"layers.{l}.w_v"].cols == spec["n_kv_heads"] * keep_vo
            assert pruned.tensors[f"layers.{l}.w_o"].rows == spec["n_heads"] * keep_vo
        else:
            keep_hd = kept_channels(spec["d_head"], r)
            keep_s = kept_channels(spec["d_state"], r)
            assert pruned.tensors[f"layers.{l}.w_x"].cols == spec["n_ssm_heads"] * keep_hd
            assert pruned.tensors[f"layers.{l}.w_b"].cols == spec["n_ssm_groups"] * keep_s
            assert pruned.tensors[f"layers.{l}.conv_b"].shape[0] == spec["n_ssm_groups"] * keep_s


def test_artifact_sizes_strictly_decrease(compressed):
    sizes = [prune_artifact(compressed, r).nbytes() for r in (0.0, 0.15, 0.25, 0.35)]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


def _keep_indices(entry, r):
    """Kept row/column index sets per tensor for one layer at layer rate r."""
    from uniql.pipeline import _paired_prefix, _per_head_prefix

    spec = entry["spec"]
    if entry["kind"] == "mlp":
        cols = np.arange(kept_channels(spec["d_intermediate"], r))
        return {"w_up": ("cols", cols), "w_gate": ("cols", cols),
                "w_down": ("rows", cols)}
    if entry["kind"] == "attn":
        p = kept_channels(spec["d_head"], r, paired=True) // 2
        keep_vo = kept_channels(spec["d_head"], r)
        return {
            "w_q": ("cols", _paired_prefix(spec["n_heads"], spec["d_head"], p)),
            "w_k": ("cols", _paired_prefix(spec["n_kv_heads"], spec["d_head"], p)),
            "w_v": ("cols", _per_head_prefix(spec["n_kv_heads"], spec["d_head"], keep_vo)),
            "w_o": ("rows", _per_head_prefix(spec["n_heads"], spec["d_head"], keep_vo)),
        }
    keep_hd = kept_channels(spec["d_head"], r)
    keep_s = kept_channels(spec["d_state"], r)
    head = _per_head_prefix(spec["n_ssm_heads"], spec["d_head"], keep_hd)
    state = _per_head_prefix(spec["n_ssm_groups"], spec["d_state"], keep_s)
    return {"w_z": ("cols", head), "w_x": ("cols", head), "w_out": ("rows", head),
            "w_b": ("cols", state), "w_c": ("cols", state),
            "w_dt": ("cols", None), "conv_x": ("rows", head),
            "conv_b": ("rows", state), "conv_c": ("rows", state)}


@pytest.mark.parametrize("rate", [0.15, 0.25, 0.35])
def test_packed_prune_commutes_with_dequantize(compressed, rate):
    """Commutation chain: slice-then-dequantize equals dequantize-then-slice
    bit-exactly for every packed tensor, so on-device pruning is lossless
    relative to float pruning."""
    pruned = prune_artifact(compressed, rate)
    layer_rates = compressed.pruning_plan.rates_for(rate)
    for l, entry in enumerate(compressed.manifest["layers"]):
        for field, (axis, idx) in _keep_indices(entry, layer_rates[l]).items():
            if idx is None:
                continue
            name = f"layers.{l}.{field}"
            full = compressed.tensors[name]
            cut = pruned.tensors[name]
            if isinstance(full, QuantizedTensor):
                ref = dequantize(full)[:, idx] if axis == "cols" else dequantize(full)[idx, :]
                assert np.array_equal(dequantize(cut), ref), name
            else:
                ref = full[:, idx] if axis == "cols" else full[idx, :]
                assert np.array_equal(cut, ref), name


def test_pruned_model_forward_is_finite(compressed, rng):
    logits, _ = model_forward(deploy_prune(compressed, 0.25),
                              rng.integers(0, VOCAB, 16))
    assert np.all(np.isfinite(logits))


def test_evaluate_self_is_zero(fp_artifact, calib):
    metrics = evaluate(fp_artifact, calib, fp_artifact)
    assert metrics["logit_mse"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["logit_kl"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["artifact_bytes"] > 0
    # metrics are deterministic for identical inputs
    assert evaluate(fp_artifact, calib, fp_artifact) == metrics


def test_evaluate_quantized_has_positive_finite_error(compressed, fp_artifact, calib):
    metrics = evaluate(compressed, calib, fp_artifact)
    assert 0 < metrics["logit_mse"] < np.inf
    assert 0 < metrics["logit_kl"] < np.inf


def test_four_bit_artifact_under_029_of_half_precision(toy_model, calib, compressed):
    half = compress(toy_model, calib, CompressionConfig(bits=16, seed=0))
    assert compressed.nbytes() / half.nbytes() <= 0.29


def test_serialized_roundtrip_preserves_behavior(compressed, rng):
    back = from_bytes(compressed.to_bytes())
    tokens = rng.integers(0, VOCAB, 12)
    a, _ = model_forward(artifact_to_model(compressed), tokens)
    b, _ = model_forward(artifact_to_model(back), tokens)
    # scales round through IEEE half on disk
    assert np.linalg.norm(a - b) <= 2e-3 * np.linalg.norm(a)


def test_mask_hook_receives_seeded_draws(toy_model, calib):
    seen = []

    def hook(step, rate, masks):
        seen.append((step, rate, {k: {n: m.copy() for n, m in v.items()}
                                  for k, v in masks.items()}))

    compress(toy_model, calib, CompressionConfig(seed=4), mask_hook=hook, mask_steps=5)
    assert len(seen) == 5
    assert all(r in (0.15, 0.25, 0.35) for _, r, _ in seen)
    # per-layer masks exist for every layer and are boolean suffix masks
    for _, _, masks in seen:
        assert set(masks) == {0, 1, 2, 3}
        for per_layer in masks.values():
            for mask in per_layer.values():
                assert mask.dtype == bool


def test_estimator_fit_transform_predict(toy_model, calib, rng):
    comp = UniqlCompressor(rates=(0.25,), seed=1)
    params = comp.get_params()
    assert params["bits"] == 4 and params["rates"] == (0.25,)
    comp.fit(toy_model, calib)
    pruned = comp.transform(0.25)
    tokens = rng.integers(0, VOCAB, 10)
    logits = comp.predict(tokens, rate=0.25)
    ref, _ = model_forward(pruned, tokens)
    assert np.array_equal(logits, ref)


def test_estimator_requires_fit(toy_model):
    comp = UniqlCompressor()
    with pytest.raises(Exception):
        comp.transform(0.0)


def test_estimator_clone_compatible():
    from sklearn.base import clone
    comp = UniqlCompressor(bits=8, epsilon=0.2)
    twin = clone(comp)
    assert twin.get_params() == comp.get_params()


def test_unfused_compression_keeps_norm_scales(toy_model, calib, rng):
    cfg = CompressionConfig(fuse_norms=False, hadamard=False, seed=2)
    art = from_bytes(compress(toy_model, calib, cfg).to_bytes())
    model = artifact_to_model(art)
    assert all(layer.norm_scale is not None for layer in model.layers)
    assert model.final_norm_scale is not None
    tokens = rng.integers(0, VOCAB, 12)
    ref, _ = model_forward(toy_model, tokens)
    got, _ = model_forward(model, tokens)
    # still a faithful (4-bit lossy) model of the original
    assert np.linalg.norm(got - ref) <= 0.6 * np.linalg.norm(ref)
