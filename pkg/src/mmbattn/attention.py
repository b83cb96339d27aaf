"""Max-pool, mean-pool and bit-wise attention over field embeddings.

Pooling squeezes each field's d-vector to one scalar.  Two independent
bottleneck MLPs (reduction ratio R, no bias terms) turn the pooled
vectors into per-field weights in (0, 1); adding the two branch outputs
gives the combined field weight.  A third MLP over the flattened
embedding yields one weight per bit.  The weights re-scale the flattened
embedding, so the whole module is a drop-in R^{F·d} -> R^{F·d} transform
in front of any tower.

Two combination modes are provided.  ``residual_product`` (default)
applies the field weights to the embeddings first and lets the bit
weights refine that multiplicatively, with a residual path.
``paper_literal`` combines the two weight vectors first and applies the
sum to the embeddings once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Graph, Tensor
from .errors import ConfigError, ContractError
from .seeding import derive_seed

COMBINE_MODES = ("residual_product", "paper_literal")


@dataclass(frozen=True)
class MMBAttnConfig:
    """Component toggles, reduction ratio, and combination mode."""

    use_max: bool = True
    use_mean: bool = True
    use_bitwise: bool = True
    reduction_ratio: int = 3
    combine_mode: str = "residual_product"

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ConfigError("attn.reduction_ratio must be >= 1")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(
                f"attn.combine_mode must be one of {COMBINE_MODES}, "
                f"got {self.combine_mode!r}")

    @property
    def enabled(self) -> bool:
        return self.use_max or self.use_mean or self.use_bitwise

    @property
    def uses_pooling(self) -> bool:
        return self.use_max or self.use_mean


def hidden_width(c: int, r: int) -> int:
    """Bottleneck width floor(C/R), clamped so tiny field counts stay legal."""
    return max(1, c // r)


@dataclass
class AttnParams:
    """Branch MLP weights; the max and mean branches never share storage."""

    max_w1: Tensor | None = None
    max_w2: Tensor | None = None
    mean_w1: Tensor | None = None
    mean_w2: Tensor | None = None
    bit_w1: Tensor | None = None
    bit_w2: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for branch in ("max", "mean", "bit"):
            for part in ("w1", "w2"):
                t = getattr(self, f"{branch}_{part}")
                if t is not None:
                    out[f"attn.{branch}.{part}"] = t
        return out


def init_attn_params(config: MMBAttnConfig, n_fields: int, d: int,
                     seed: int) -> AttnParams:
    """Seeded Normal(0, 1/C) weights per branch (C = branch input width)."""

    def make(branch: str, c: int) -> tuple[Tensor, Tensor]:
        h = hidden_width(c, config.reduction_ratio)
        std = 1.0 / np.sqrt(c)
        rng1 = np.random.default_rng(derive_seed(seed, f"init:attn.{branch}.w1"))
        rng2 = np.random.default_rng(derive_seed(seed, f"init:attn.{branch}.w2"))
        w1 = Tensor(rng1.normal(0.0, std, size=(h, c)), requires_grad=True)
        w2 = Tensor(rng2.normal(0.0, std, size=(c, h)), requires_grad=True)
        return w1, w2

    params = AttnParams()
    if config.use_max:
        params.max_w1, params.max_w2 = make("max", n_fields)
    if config.use_mean:
        params.mean_w1, params.mean_w2 = make("mean", n_fields)
    if config.use_bitwise:
        params.bit_w1, params.bit_w2 = make("bit", n_fields * d)
    return params


def pool(g: Graph, e: Tensor, kind: str) -> Tensor:
    """Squeeze each field's embedding to one scalar: (B,F,d) -> (B,F)."""
    if kind == "max":
        return g.reduce_max(e, axis=2)
    if kind == "mean":
        return g.reduce_mean(e, axis=2)
    raise ContractError(f"unknown pooling kind {kind!r}")


def branch_attention(g: Graph, s: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """sigmoid(relu(s · W1ᵀ) · W2ᵀ): per-field weights, strictly in (0, 1)."""
    hidden = g.relu(g.matmul(s, g.transpose(w1)))
    return g.sigmoid(g.matmul(hidden, g.transpose(w2)))


def mm_combine(g: Graph, w_max: Tensor | None, w_mean: Tensor | None) -> Tensor:
    """Sum of the enabled pooled-attention branches."""
    if w_max is None and w_mean is None:
        raise ContractError("mm_combine needs at least one branch output")
    if w_max is not None and w_mean is not None:
        return g.add(w_max, w_mean)
    return w_max if w_max is not None else w_mean


def mm_reweight(g: Graph, e: Tensor, w_mm: Tensor) -> Tensor:
    """Scale each field's d embedding positions by its per-field weight."""
    b, f, _ = e.shape
    return g.mul(e, g.reshape(w_mm, (b, f, 1)))


def bitwise_attention(g: Graph, e_flat: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """One weight per flattened embedding position: (B,F·d) -> (B,F·d)."""
    hidden = g.relu(g.matmul(e_flat, g.transpose(w1)))
    return g.sigmoid(g.matmul(hidden, g.transpose(w2)))


def apply_attention(g: Graph, e: Tensor, params: AttnParams | None,
                    config: MMBAttnConfig | None,
                    collect: dict | None = None) -> Tensor:
    """Run the full module: (B,F,d) embeddings -> (B,F·d) re-weighted.

    With every component toggled off the module is the identity on the
    flattened embedding, exactly.  ``collect``, when given, receives the
    intermediate weight tensors under keys w_max/w_mean/w_mm/w_bit.
    """
    b, f, d = e.shape
    flat_shape = (b, f * d)
    if config is None or not config.enabled:
        return g.reshape(e, flat_shape)
    if params is None:
        raise ContractError("attention enabled but no parameters supplied")

    w_max = w_mean = w_mm = w_bit = None
    if config.use_max:
        w_max = branch_attention(g, pool(g, e, "max"), params.max_w1, params.max_w2)
    if config.use_mean:
        w_mean = branch_attention(g, pool(g, e, "mean"), params.mean_w1, params.mean_w2)
    if config.uses_pooling:
        w_mm = mm_combine(g, w_max, w_mean)
    if config.use_bitwise:
        w_bit = bitwise_attention(g, g.reshape(e, flat_shape),
                                  params.bit_w1, params.bit_w2)
    if collect is not None:
        collect.update(w_max=w_max, w_mean=w_mean, w_mm=w_mm, w_bit=w_bit)

    if w_bit is None:
        return g.reshape(mm_reweight(g, e, w_mm), flat_shape)
    if w_mm is None:
        return g.mul(g.reshape(e, flat_shape), w_bit)

    if config.combine_mode == "residual_product":
        f_mm = g.reshape(mm_reweight(g, e, w_mm), flat_shape)
        f_bit = g.mul(f_mm, w_bit)
        return g.add(f_mm, f_bit)

    # paper_literal: combine the weight vectors first, apply them once.
    ones = Tensor(np.ones((b, f, d)))
    w_mm_flat = g.reshape(g.mul(ones, g.reshape(w_mm, (b, f, 1))), flat_shape)
    f_bit = g.mul(w_mm_flat, w_bit)
    w_total = g.add(w_mm_flat, f_bit)
    return g.mul(g.reshape(e, flat_shape), w_total)


def param_count(config: MMBAttnConfig | None, n_fields: int, d: int) -> int:
    """Closed-form weight count of the enabled branches."""
    if config is None or not config.enabled:
        return 0
    total = 0
    h_field = hidden_width(n_fields, config.reduction_ratio)
    if config.use_max:
        total += 2 * n_fields * h_field
    if config.use_mean:
        total += 2 * n_fields * h_field
    if config.use_bitwise:
        c = n_fields * d
        total += 2 * c * hidden_width(c, config.reduction_ratio)
    return total
