import numpy as np
import pytest

from uniql.blocks import BlockSpec
from uniql.model import model_forward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_spec():
    return BlockSpec()


@pytest.fixture
def mhsa_spec():
    return BlockSpec(n_heads=4, n_kv_heads=4)


def random_psd(rng, dim, rank=None):
    rank = rank or dim
    A = rng.standard_normal((rank + dim, dim))
    return (A.T @ A) / (rank + dim)


def capture_layer(model, layer_index, rng, n_sequences=6, seq_len=32):
    """Run calibration forwards and return one layer's captures."""
    caps = []
    for _ in range(n_sequences):
        tokens = rng.integers(0, model.vocab_size, seq_len)
        _, trace = model_forward(model, tokens, capture=True)
        caps.append(trace.captures[layer_index])
    return caps
