"""uniql: one-pass post-training compression with on-device configurable pruning.

Weights are sorted by importance so the least useful channels sit last,
quantized into packed 4-bit groups with per-group half-precision scales, and
serialized once; any configured pruning rate afterwards is a metadata-driven
slice of the packed artifact.
"""

from .allocation import PruningPlan, allocate_rates, block_influence, sample_mask
from .artifact import (
    CalibrationSet,
    ModelArtifact,
    artifact_to_model,
    load,
    load_calibration,
    model_to_artifact,
    random_calibration,
    save_calibration,
)
from .blocks import (
    AttnWeights,
    BlockSpec,
    CalibrationCapture,
    MambaWeights,
    MlpWeights,
    attn_forward,
    mamba_forward,
    mlp_forward,
    rope_apply,
    toy_block_spec,
)
from .linalg import (
    CorrelationStats,
    accumulate_correlation,
    argsort_desc,
    inv_sqrt_psd,
    ridge_leverage,
    svd,
)
from .model import (
    Layer,
    Model,
    build_toy_model,
    fuse_model_norms,
    hadamard_fuse,
    model_forward,
)
from .packing import (
    PackedBuffer,
    QuantizedTensor,
    pack_int4,
    prune_packed,
    prune_packed_rows,
    unpack_int4,
)
from .pipeline import (
    CompressionConfig,
    UniqlCompressor,
    compress,
    deploy_prune,
    evaluate,
    prune_artifact,
)
from .quantizer import (
    FusionConfig,
    dequantize,
    fuse_norm,
    gptq_compensate,
    quantize_group_sym,
)
from .sorting import SortRecord, sort_bc, sort_mlp, sort_qk, sort_vo, sort_zxo

__version__ = "0.1.0"

__all__ = [
    "AttnWeights", "BlockSpec", "CalibrationCapture", "CalibrationSet",
    "CompressionConfig", "CorrelationStats", "FusionConfig", "Layer", "MambaWeights",
    "MlpWeights", "Model", "ModelArtifact", "PackedBuffer", "PruningPlan",
    "QuantizedTensor", "SortRecord", "UniqlCompressor",
    "accumulate_correlation", "allocate_rates", "argsort_desc",
    "artifact_to_model", "attn_forward", "block_influence", "build_toy_model",
    "compress", "deploy_prune", "dequantize", "evaluate", "fuse_norm",
    "fuse_model_norms", "gptq_compensate", "hadamard_fuse", "inv_sqrt_psd",
    "load", "load_calibration",
    "mamba_forward", "mlp_forward", "model_forward", "model_to_artifact",
    "pack_int4", "prune_artifact", "prune_packed", "prune_packed_rows",
    "quantize_group_sym", "random_calibration", "ridge_leverage", "rope_apply",
    "sample_mask", "save_calibration", "sort_bc", "sort_mlp", "sort_qk",
    "sort_vo", "sort_zxo", "svd", "toy_block_spec", "unpack_int4",
]
