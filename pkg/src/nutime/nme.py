"""Multi-scale embedding of arbitrary-magnitude scalars.

A scalar x is mapped through one linear+LayerNorm block per scale k:

    y_k(x) = LN(x * w + k * b)

Each block only resolves inputs near its own scale and saturates elsewhere,
so the final embedding is a convex combination of the per-scale outputs,
weighted by log-proximity of |x| to each scale:

    e(x) = sum_i alpha_i(x) * y_i(x),
    alpha_i(x) ~ 1 / |ln(|x| / k_i + eps)|   (normalized to a simplex)

Natural log is used; the reciprocal peaks when |x| is close to k_i.  The
weights are treated as constants in the gradient graph: x is an input, not a
parameter, and the |.| makes the weighting non-smooth at scale boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_SCALES = tuple(10.0**e for e in range(-4, 5))
LN_EPS = 1e-5


@dataclass
class NmeConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    epsilon: float = 1e-6
    embed_dim: int = 32
    weight_clamp: float = 1e12
    weighted: bool = True

    def __post_init__(self):
        self.scales = tuple(float(k) for k in self.scales)
        if any(k <= 0 for k in self.scales):
            raise ValueError("scales must be positive")
        if any(a >= b for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly increasing")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")

    @property
    def n_scales(self) -> int:
        return len(self.scales)


def init_nme_params(
    cfg: NmeConfig,
    rng: np.random.Generator,
    prefix: str = "nme",
    init_std: float = 1.0,
) -> dict[str, Tensor]:
    """Gaussian w/b per scale; LayerNorm affine starts at identity."""
    params: dict[str, Tensor] = {}
    d = cfg.embed_dim
    for i in range(cfg.n_scales):
        params[f"{prefix}.{i}.w"] = T.parameter(rng.normal(0.0, init_std, d))
        params[f"{prefix}.{i}.b"] = T.parameter(rng.normal(0.0, init_std, d))
        params[f"{prefix}.{i}.gamma"] = T.parameter(np.ones(d))
        params[f"{prefix}.{i}.beta"] = T.parameter(np.zeros(d))
    return params


def basic_block(
    x: Tensor,
    k: float,
    w: Tensor,
    b: Tensor,
    gamma: Tensor,
    beta: Tensor,
    ln_eps: float = LN_EPS,
) -> Tensor:
    """LN(x * w + k * b) for a batch of scalars x with shape [B]."""
    if k <= 0:
        raise ValueError("scale k must be positive")
    x2 = T.reshape(x, (*x.shape, 1))  # [B, 1] broadcasting against [D]
    z = T.add(T.mul(x2, w), T.mul(b, float(k)))
    return T.layer_norm(z, gamma, beta, eps=ln_eps)


def scale_weights(x: np.ndarray | float, cfg: NmeConfig) -> np.ndarray:
    """Simplex weights over scales for each scalar in x; shape [..., n]."""
    x = np.asarray(x, dtype=np.float64)
    scales = np.array(cfg.scales)
    ratio = np.abs(x)[..., None] / scales + cfg.epsilon
    with np.errstate(divide="ignore"):
        denom = np.abs(np.log(ratio))
        raw = np.where(denom > 0.0, 1.0 / np.maximum(denom, 1.0 / cfg.weight_clamp),
                       cfg.weight_clamp)
    raw = np.minimum(raw, cfg.weight_clamp)
    return raw / raw.sum(axis=-1, keepdims=True)


def nme_embed(x: Tensor, cfg: NmeConfig, params: dict[str, Tensor],
              prefix: str = "nme") -> Tensor:
    """Weighted per-scale ensemble embedding of a batch of scalars [B] -> [B, D].

    With cfg.weighted False the blocks are averaged uniformly instead.
    """
    n = cfg.n_scales
    if cfg.weighted:
        alphas = scale_weights(x.data, cfg)  # constant coefficients
    else:
        alphas = np.full((*x.shape, n), 1.0 / n)
    alphas = alphas.astype(x.data.dtype)
    out = None
    for i, k in enumerate(cfg.scales):
        y = basic_block(
            x,
            k,
            params[f"{prefix}.{i}.w"],
            params[f"{prefix}.{i}.b"],
            params[f"{prefix}.{i}.gamma"],
            params[f"{prefix}.{i}.beta"],
        )
        term = T.mul(y, alphas[..., i : i + 1])
        out = term if out is None else T.add(out, term)
    return out
