"""Serialized model container: JSON manifest plus length-prefixed tensor blobs.

A container holds either raw float tensors (fp32/fp16 "model file" form) or
packed int4/int8 tensors with their half-precision scales (compressed form),
along with everything needed to prune at any planned rate without
recomputation: per-layer specs, sort records, rotary gather indices, singular
spectra, the pruning plan and the fusion flags.

File layout (little-endian): magic b"UQLM", u32 manifest length, UTF-8 JSON
manifest, then one u64 length prefix + payload per tensor, in manifest order.
Quantized payloads use the packing module's blob layout; raw payloads are the
bare C-order little-endian float bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import packing
from .allocation import PruningPlan
from .blocks import AttnWeights, BlockSpec, MambaWeights, MlpWeights
from .errors import ArtifactError, ShapeError
from .model import ATTN, MAMBA, MLP, Layer, Model
from .packing import QuantizedTensor
from .quantizer import dequantize
from .sorting import SortRecord

MAGIC = b"UQLM"
FORMAT_VERSION = 1

_F32 = "f32"
_F16 = "f16"
_Q = "q"  # packed integer payload

_MLP_FIELDS = ("w_up", "w_gate", "w_down")
_ATTN_FIELDS = ("w_q", "w_k", "w_v", "w_o")
_MAMBA_PROJ_FIELDS = ("w_z", "w_x", "w_b", "w_c", "w_dt", "w_out")
_MAMBA_AUX_FIELDS = ("a_log", "dt_bias", "conv_x", "conv_b", "conv_c")

LAYER_FIELDS = {
    MLP: _MLP_FIELDS,
    ATTN: _ATTN_FIELDS,
    MAMBA: _MAMBA_PROJ_FIELDS + _MAMBA_AUX_FIELDS,
}


@dataclass
class CalibrationSet:
    """Integer token sequences feeding the toy embedding."""

    sequences: list[np.ndarray]

    def __post_init__(self) -> None:
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        if any(s.ndim != 1 for s in self.sequences):
            raise ShapeError("calibration sequences must be 1-D token streams")


def random_calibration(vocab_size: int, n_sequences: int = 32, seq_len: int = 128,
                       seed: int = 0) -> CalibrationSet:
    rng = np.random.default_rng(seed)
    return CalibrationSet(
        [rng.integers(0, vocab_size, seq_len) for _ in range(n_sequences)])


def save_calibration(calib: CalibrationSet, path) -> None:
    payload = {"sequences": [s.tolist() for s in calib.sequences]}
    Path(path).write_text(json.dumps(payload))


def load_calibration(path) -> CalibrationSet:
    try:
        payload = json.loads(Path(path).read_text())
        return CalibrationSet([np.asarray(s) for s in payload["sequences"]])
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise ArtifactError(f"cannot read calibration set {path}: {err}") from err


@dataclass
class ModelArtifact:
    manifest: dict
    tensors: dict[str, np.ndarray | QuantizedTensor] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        return _serialize(self)

    def nbytes(self) -> int:
        return len(self.to_bytes())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @property
    def pruning_plan(self) -> PruningPlan | None:
        return _plan_from_manifest(self.manifest)


# --- manifest helpers -------------------------------------------------------

def _spec_to_dict(spec: BlockSpec) -> dict:
    return {
        "d_hidden": spec.d_hidden, "d_head": spec.d_head,
        "d_intermediate": spec.d_intermediate, "d_state": spec.d_state,
        "n_heads": spec.n_heads, "n_kv_heads": spec.n_kv_heads,
        "n_ssm_heads": spec.n_ssm_heads, "n_ssm_groups": spec.n_ssm_groups,
        "conv_width": spec.conv_width,
    }


def _spec_from_dict(d: dict) -> BlockSpec:
    return BlockSpec(**d)


def _record_to_dict(rec: SortRecord) -> dict:
    return {
        "target": rec.target,
        "kind": rec.kind,
        "head": rec.head,
        "per_head": rec.per_head,
        "indices": None if rec.indices is None else [int(i) for i in rec.indices],
        "sigma": None if rec.sigma is None else [float(s) for s in rec.sigma],
    }


def _record_from_dict(d: dict) -> SortRecord:
    return SortRecord(
        target=d["target"], kind=d["kind"], head=d.get("head"),
        per_head=d.get("per_head", False),
        indices=None if d.get("indices") is None else np.asarray(d["indices"], dtype=np.int64),
        sigma=None if d.get("sigma") is None else np.asarray(d["sigma"], dtype=np.float64),
    )


def plan_to_manifest(plan: PruningPlan | None) -> dict | None:
    if plan is None:
        return None
    return {
        "epsilon": plan.epsilon,
        "rates": [
            {"rate": float(r), "layer_rates": [float(x) for x in plan.per_layer[r]]}
            for r in plan.global_rates
        ],
    }


def _plan_from_manifest(manifest: dict) -> PruningPlan | None:
    raw = manifest.get("pruning_plan")
    if raw is None:
        return None
    plan = PruningPlan(global_rates=[e["rate"] for e in raw["rates"]],
                       epsilon=raw["epsilon"])
    for entry in raw["rates"]:
        plan.per_layer[entry["rate"]] = np.asarray(entry["layer_rates"], dtype=np.float64)
    return plan


# --- building artifacts from models ----------------------------------------

def model_to_artifact(model: Model, dtype: str = "float32",
                      sort_records: list[list[SortRecord]] | None = None,
                      plan: PruningPlan | None = None,
                      extra: dict | None = None) -> ModelArtifact:
    """Wrap a float model in a container (dtype "float32" or "float16")."""
    kind = {"float32": _F32, "float16": _F16}[dtype]
    tensors: dict[str, np.ndarray | QuantizedTensor] = {}
    entries: list[dict] = []

    def add(name: str, arr: np.ndarray) -> None:
        tensors[name] = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "format": kind, "shape": list(arr.shape)})

    add("embedding", model.embedding)
    add("logit_weight", model.logit_weight)
    if model.final_norm_scale is not None:
        add("final_norm_scale", model.final_norm_scale)
    layer_entries = []
    for i, layer in enumerate(model.layers):
        if layer.norm_scale is not None:
            add(f"layers.{i}.norm_scale", layer.norm_scale)
        for f in LAYER_FIELDS[layer.kind]:
            add(f"layers.{i}.{f}", getattr(layer.weights, f))
        layer_entries.append({
            "kind": layer.kind,
            "spec": _spec_to_dict(layer.spec),
            "rope_theta": getattr(layer.weights, "rope_theta", None),
            "has_norm_scale": layer.norm_scale is not None,
            "qk_gather": None if layer.qk_gather is None
            else [[int(x) for x in g] for g in layer.qk_gather],
            "sort_records": None if sort_records is None
            else [_record_to_dict(r) for r in sort_records[i]],
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "vocab_size": model.vocab_size,
        "d_hidden": model.d_hidden,
        "fusion": {"norm_fused": model.norm_fused,
                   "hadamard": model.hadamard_applied},
        "layers": layer_entries,
        "pruning_plan": plan_to_manifest(plan),
        "pruned_rate": None,
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    return ModelArtifact(manifest=manifest, tensors=tensors)


def artifact_to_model(artifact: ModelArtifact) -> Model:
    """Materialize a runnable float model, dequantizing packed tensors."""
    man = artifact.manifest

    def get(name: str) -> np.ndarray:
        t = artifact.tensors[name]
        return dequantize(t) if isinstance(t, QuantizedTensor) else np.asarray(t, dtype=np.float64)

    layers = []
    for i, entry in enumerate(man["layers"]):
        kind = entry["kind"]
        spec = _spec_from_dict(entry["spec"])
        fields = {f: get(f"layers.{i}.{f}") for f in LAYER_FIELDS[kind]}
        if kind == MLP:
            weights = MlpWeights(**fields)
        elif kind == ATTN:
            weights = AttnWeights(**fields, rope_theta=entry["rope_theta"])
        elif kind == MAMBA:
            fields["a_log"] = fields["a_log"].ravel()
            fields["dt_bias"] = fields["dt_bias"].ravel()
            weights = MambaWeights(**fields)
        else:
            raise ArtifactError(f"unknown layer kind {kind!r}")
        norm = get(f"layers.{i}.norm_scale").ravel() if entry.get("has_norm_scale") else None
        gather = entry.get("qk_gather")
        layers.append(Layer(
            kind=kind, spec=spec, weights=weights, norm_scale=norm,
            qk_gather=None if gather is None else [np.asarray(g, dtype=np.int64) for g in gather],
        ))
    final_norm = None
    if "final_norm_scale" in artifact.tensors:
        final_norm = get("final_norm_scale").ravel()
    return Model(
        embedding=get("embedding"),
        layers=layers,
        logit_weight=get("logit_weight"),
        final_norm_scale=final_norm,
        norm_fused=man["fusion"]["norm_fused"],
        hadamard_applied=man["fusion"]["hadamard"],
    )


def sort_records(artifact: ModelArtifact) -> list[list[SortRecord]] | None:
    recs = []
    for entry in artifact.manifest["layers"]:
        raw = entry.get("sort_records")
        if raw is None:
            return None
        recs.append([_record_from_dict(d) for d in raw])
    return recs


# --- binary serialization ---------------------------------------------------

def _raw_blob(arr: np.ndarray, kind: str) -> bytes:
    dtype = "<f4" if kind == _F32 else "<f2"
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _serialize(artifact: ModelArtifact) -> bytes:
    man = artifact.manifest
    blobs = []
    for entry in man["tensors"]:
        t = artifact.tensors[entry["name"]]
        if entry["format"] == _Q:
            if not isinstance(t, QuantizedTensor):
                raise ArtifactError(f"tensor {entry['name']} is not quantized")
            blobs.append(packing.to_bytes(t))
        else:
            blobs.append(_raw_blob(np.asarray(t), entry["format"]))
    manifest_bytes = json.dumps(man, sort_keys=True,
                                separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(manifest_bytes)), manifest_bytes]
    for blob in blobs:
        out.append(struct.pack("<Q", len(blob)))
        out.append(blob)
    return b"".join(out)


def from_bytes(data: bytes) -> ModelArtifact:
    if data[:4] != MAGIC:
        raise ArtifactError("not a model artifact (bad magic)")
    (man_len,) = struct.unpack_from("<I", data, 4)
    try:
        man = json.loads(data[8 : 8 + man_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ArtifactError(f"malformed manifest: {err}") from err
    if man.get("format_version") != FORMAT_VERSION:
        raise ArtifactError("unsupported artifact format version")
    off = 8 + man_len
    tensors: dict[str, np.ndarray | QuantizedTensor] = {}
    for entry in man["tensors"]:
        if off + 8 > len(data):
            raise ArtifactError("artifact truncated (missing blob header)")
        (blob_len,) = struct.unpack_from("<Q", data, off)
        off += 8
        blob = data[off : off + blob_len]
        if len(blob) != blob_len:
            raise ArtifactError("artifact truncated (short blob)")
        off += blob_len
        shape = tuple(entry["shape"])
        if entry["format"] == _Q:
            q = packing.from_bytes(blob, column_scaled=entry.get("column_scaled", False))
            if (q.rows, q.cols) != shape:
                raise ArtifactError(f"tensor {entry['name']} shape mismatch")
            tensors[entry["name"]] = q
        else:
            dtype = "<f4" if entry["format"] == _F32 else "<f2"
            arr = np.frombuffer(blob, dtype=dtype).astype(np.float64)
            if arr.size != int(np.prod(shape)):
                raise ArtifactError(f"tensor {entry['name']} size mismatch")
            tensors[entry["name"]] = arr.reshape(shape)
    if off != len(data):
        raise ArtifactError("artifact has trailing bytes")
    return ModelArtifact(manifest=man, tensors=tensors)


def load(path) -> ModelArtifact:
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise ArtifactError(f"cannot read artifact {path}: {err}") from err
    return from_bytes(data)
