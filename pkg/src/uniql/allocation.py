"""Block-influence scoring and conversion of global pruning-rate targets
into per-layer rates and channel masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllocationError, NumericalDomainError
from .validation import check_matrix, check_same_shape, check_vector


@dataclass
class PruningPlan:
    """Per-layer rates for every configured global pruning rate."""

    global_rates: list[float]
    per_layer: dict[float, np.ndarray] = field(default_factory=dict)
    epsilon: float = 0.1

    def rates_for(self, global_rate: float) -> np.ndarray:
        for r, layer_rates in self.per_layer.items():
            if abs(r - global_rate) <= 1e-9:
                return layer_rates
        raise KeyError(global_rate)


def block_influence(x_l, y_l) -> float:
    """1 - mean per-token cosine similarity between a block's input and output.

    Zero rows are skipped; a block that changes nothing scores 0, a sign flip
    scores 2. Low influence means the layer can be pruned harder.
    """
    x_l = check_matrix(x_l, "x_l")
    y_l = check_matrix(y_l, "y_l")
    check_same_shape(x_l, y_l, "x_l/y_l")
    xn = np.linalg.norm(x_l, axis=1)
    yn = np.linalg.norm(y_l, axis=1)
    keep = (xn > 0) & (yn > 0)
    if not np.any(keep):
        raise NumericalDomainError("all rows are zero; influence is undefined")
    cos = np.sum(x_l[keep] * y_l[keep], axis=1) / (xn[keep] * yn[keep])
    return float(1.0 - cos.mean())


def allocate_rates(scores, p_avg: float, epsilon: float = 0.1,
                   rate_cap: float = 0.9) -> np.ndarray:
    """Smooth layer-wise rates r = L * p_avg * softmax(-scores / epsilon).

    High-influence layers receive low rates. Rates above ``rate_cap`` are
    clamped and the excess is redistributed proportionally among unclamped
    layers until a fixpoint, preserving the global mean exactly.
    """
    scores = check_vector(scores, "scores")
    if not 0.0 < p_avg < 1.0:
        raise AllocationError("p_avg must lie in (0, 1)")
    if epsilon <= 0:
        raise AllocationError("epsilon must be > 0")
    if p_avg > rate_cap:
        raise AllocationError(
            f"global rate {p_avg} exceeds the per-layer cap {rate_cap}")

    L = scores.shape[0]
    z = -scores / epsilon
    z -= z.max()
    soft = np.exp(z)
    soft /= soft.sum()
    rates = L * p_avg * soft

    clamped = np.zeros(L, dtype=bool)
    for _ in range(L + 1):
        over = (rates > rate_cap) & ~clamped
        if not np.any(over):
            break
        excess = float(np.sum(rates[over] - rate_cap))
        rates[over] = rate_cap
        clamped |= over
        free = ~clamped
        total_free = float(rates[free].sum())
        if not np.any(free) or total_free <= 0:
            raise AllocationError("cannot redistribute clamped excess")
        rates[free] += excess * rates[free] / total_free
    return rates


# Channel groups that sort symmetric rotary pairs prune in (j, j + D/2)
# pairs; their masks must stay pair-consistent with the on-device slices.
PLAIN = "plain"
PAIRED = "paired"


def kept_channels(dim: int, rate: float, paired: bool = False) -> int:
    """Channels kept at a layer rate: ceil((1-r)*D), floored to a whole
    number of pairs for paired groups."""
    keep = int(np.ceil((1.0 - rate) * dim))
    keep = max(min(keep, dim), 0)
    if paired:
        keep = 2 * (keep // 2)
    return keep


def sample_mask(plan: PruningPlan, layer: int, dims, rng_seed: int
                ) -> tuple[float, dict[str, np.ndarray]]:
    """Draw a global rate (seeded, uniform over the plan) and build masks.

    ``dims`` is a sequence of (name, channel_count, kind) with kind PLAIN or
    PAIRED. Plain groups mask the last floor(r_l * D) channels, the least
    ranked under descending sort; paired groups mask the suffix of each half
    so whole rotary pairs die together, matching the deploy-time slices.
    Returns the drawn global rate and the boolean keep-masks.
    """
    if not plan.global_rates:
        raise AllocationError("pruning plan has no global rates")
    rng = np.random.default_rng(rng_seed)
    drawn = plan.global_rates[int(rng.integers(len(plan.global_rates)))]
    r_l = float(plan.rates_for(drawn)[layer])
    masks: dict[str, np.ndarray] = {}
    for name, dim, kind in dims:
        mask = np.ones(dim, dtype=bool)
        if kind == PAIRED:
            half = dim // 2
            p = kept_channels(dim, r_l, paired=True) // 2
            mask[p:half] = False
            mask[half + p:] = False
        else:
            n_masked = int(np.floor(r_l * dim))
            if n_masked > 0:
                mask[dim - n_masked:] = False
        masks[name] = mask
    return drawn, masks
