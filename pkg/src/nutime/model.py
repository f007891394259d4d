"""Transformer encoder over window tokens.

Pipeline: decompose -> per-window embeddings (shape via linear+LN, mean and
std via the multi-scale scalar embedding) -> concat -> project to d_model ->
add sinusoidal positions -> prepend CLS -> pre-LN transformer blocks -> the
CLS output of the final layer is the series representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nme import LN_EPS, NmeConfig, init_nme_params, nme_embed
from .tensor import Tensor
from .tokenizer import RawSeries, TokenGrid, decompose


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 6
    n_heads: int = 8
    mlp_dim: int = 512
    window_size: int = 16
    shape_embed_dim: int = 64
    mean_std_embed_dim: int = 32
    nme: NmeConfig = field(default_factory=NmeConfig)
    max_tokens: int = 512
    n_channels: int = 1
    n_classes: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sinusoidal positions")
        if isinstance(self.nme, dict):
            self.nme = NmeConfig(**self.nme)
        self.nme = NmeConfig(
            scales=self.nme.scales,
            epsilon=self.nme.epsilon,
            embed_dim=self.mean_std_embed_dim,
            weight_clamp=self.nme.weight_clamp,
            weighted=self.nme.weighted,
        )

    @property
    def concat_dim(self) -> int:
        return self.shape_embed_dim + 2 * self.mean_std_embed_dim

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "d_model", "n_layers", "n_heads", "mlp_dim", "window_size",
                "shape_embed_dim", "mean_std_embed_dim", "max_tokens",
                "n_channels", "n_classes",
            )
        }
        d["nme"] = {
            "scales": list(self.nme.scales),
            "epsilon": self.nme.epsilon,
            "embed_dim": self.nme.embed_dim,
            "weight_clamp": self.nme.weight_clamp,
            "weighted": self.nme.weighted,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "nme" in d:
            nme = dict(d["nme"])
            nme["scales"] = tuple(nme["scales"])
            d["nme"] = NmeConfig(**nme)
        return ModelConfig(**d)


@dataclass
class Representation:
    vector: Tensor  # [d_model] CLS output of the final layer


@dataclass
class AttentionMap:
    """CLS-row attention scores: per layer, per head, over CLS + N patches."""

    per_layer: list[np.ndarray]  # each [n_heads, N + 1]

    @property
    def last_layer(self) -> np.ndarray:
        return self.per_layer[-1]

    @property
    def head_averaged(self) -> np.ndarray:
        return self.last_layer.mean(axis=0)

    @property
    def patch_scores(self) -> np.ndarray:
        """Head-averaged last-layer scores over patch tokens only."""
        return self.head_averaged[1:]


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    w, d = cfg.window_size, cfg.d_model

    p["shape_embed.w"] = T.parameter(_linear_init(rng, w, cfg.shape_embed_dim))
    p["shape_embed.b"] = T.parameter(np.zeros(cfg.shape_embed_dim))
    p["shape_embed.gamma"] = T.parameter(np.ones(cfg.shape_embed_dim))
    p["shape_embed.beta"] = T.parameter(np.zeros(cfg.shape_embed_dim))

    p.update(init_nme_params(cfg.nme, rng, prefix="mean_nme"))
    p.update(init_nme_params(cfg.nme, rng, prefix="std_nme"))

    p["token_proj.w"] = T.parameter(_linear_init(rng, cfg.concat_dim, d))
    p["token_proj.b"] = T.parameter(np.zeros(d))

    if cfg.n_channels > 1:
        # near-identity at each channel slot plus small noise
        base = np.tile(np.eye(d) / cfg.n_channels, (cfg.n_channels, 1))
        noise = rng.normal(0.0, 0.01 / math.sqrt(d), base.shape)
        p["channel_merge.w"] = T.parameter(base + noise)
        p["channel_merge.b"] = T.parameter(np.zeros(d))

    p["cls"] = T.parameter(rng.normal(0.0, 0.02, d))

    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}"
        p[f"{pre}.ln1.gamma"] = T.parameter(np.ones(d))
        p[f"{pre}.ln1.beta"] = T.parameter(np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{name}"] = T.parameter(_linear_init(rng, d, d))
            p[f"{pre}.attn.{name}_b"] = T.parameter(np.zeros(d))
        p[f"{pre}.ln2.gamma"] = T.parameter(np.ones(d))
        p[f"{pre}.ln2.beta"] = T.parameter(np.zeros(d))
        p[f"{pre}.mlp.w1"] = T.parameter(_linear_init(rng, d, cfg.mlp_dim))
        p[f"{pre}.mlp.b1"] = T.parameter(np.zeros(cfg.mlp_dim))
        p[f"{pre}.mlp.w2"] = T.parameter(_linear_init(rng, cfg.mlp_dim, d))
        p[f"{pre}.mlp.b2"] = T.parameter(np.zeros(d))

    p["final_ln.gamma"] = T.parameter(np.ones(d))
    p["final_ln.beta"] = T.parameter(np.zeros(d))

    if cfg.n_classes is not None:
        p["head.w1"] = T.parameter(_linear_init(rng, d, d))
        p["head.b1"] = T.parameter(np.zeros(d))
        p["head.w2"] = T.parameter(_linear_init(rng, d, cfg.n_classes))
        p["head.b2"] = T.parameter(np.zeros(cfg.n_classes))
    return p


def parameter_count(cfg: ModelConfig) -> int:
    """Exact learnable-parameter count as a pure function of the config."""
    rng = np.random.default_rng(0)
    return sum(p.size for p in init_model_params(cfg, rng).values())


def sinusoidal_pe(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos interleaved positional encoding, shape [n, d]."""
    if d % 2 != 0:
        raise ValueError("positional encoding dimension must be even")
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def embed_shape(shape: Tensor, params: dict[str, Tensor],
                window_size: int | None = None) -> Tensor:
    """LN(linear(shape)) for shape vectors [..., W]."""
    w = params["shape_embed.w"]
    if window_size is not None and shape.shape[-1] != window_size:
        raise ValueError(
            f"shape length {shape.shape[-1]} != window size {window_size}"
        )
    if shape.shape[-1] != w.shape[0]:
        raise ValueError("shape vector length does not match embedder")
    flat = T.reshape(shape, (-1, shape.shape[-1]))
    z = T.add(T.matmul(flat, w), params["shape_embed.b"])
    out = T.layer_norm(z, params["shape_embed.gamma"], params["shape_embed.beta"],
                       eps=LN_EPS)
    return T.reshape(out, (*shape.shape[:-1], w.shape[1]))


def _channel_tokens(
    shapes: Tensor, means: Tensor, stds: Tensor,
    params: dict[str, Tensor], cfg: ModelConfig,
) -> Tensor:
    """Tokens for one batch of windows: [..., W], [...], [...] -> [..., d]."""
    se = embed_shape(shapes, params, window_size=cfg.window_size)
    me = nme_embed(means, cfg.nme, params, prefix="mean_nme")
    de = nme_embed(stds, cfg.nme, params, prefix="std_nme")
    cat = T.concat([se, me, de], axis=-1)
    flat = T.reshape(cat, (-1, cfg.concat_dim))
    proj = T.add(T.matmul(flat, params["token_proj.w"]), params["token_proj.b"])
    return T.reshape(proj, (*cat.shape[:-1], cfg.d_model))


def merge_channels(per_channel: Tensor, params: dict[str, Tensor],
                   cfg: ModelConfig) -> Tensor:
    """Concat per-position channel tokens and project: [B,C,N,d] -> [B,N,d]."""
    b, c, n, d = per_channel.shape
    if c != cfg.n_channels:
        raise ValueError(f"expected {cfg.n_channels} channels, got {c}")
    if c == 1:
        stacked = T.reshape(per_channel, (b, n, d))
        if "channel_merge.w" not in params:
            return stacked
    else:
        stacked = T.reshape(T.transpose(per_channel, (0, 2, 1, 3)), (b, n, c * d))
    flat = T.reshape(stacked, (-1, stacked.shape[-1]))
    out = T.add(T.matmul(flat, params["channel_merge.w"]), params["channel_merge.b"])
    return T.reshape(out, (b, n, d))


def assemble_tokens(grid: TokenGrid, params: dict[str, Tensor],
                    cfg: ModelConfig) -> Tensor:
    """Single-series token assembly: TokenGrid -> [N, d_model] with positions."""
    if grid.window_size != cfg.window_size:
        raise ValueError(
            f"grid window size {grid.window_size} != config {cfg.window_size}"
        )
    dtype = T.get_default_dtype()
    shapes = Tensor(grid.shapes[None], dtype=dtype)  # [1, C, N, W]
    means = Tensor(grid.means[None], dtype=dtype)
    stds = Tensor(grid.stds[None], dtype=dtype)
    tokens = _channel_tokens(shapes, means, stds, params, cfg)  # [1, C, N, d]
    merged = merge_channels(tokens, params, cfg)  # [1, N, d]
    n = grid.n_windows
    pe = sinusoidal_pe(n + 1, cfg.d_model)[1:].astype(dtype)  # patches start at 1
    return T.reshape(T.add(merged, Tensor(pe, dtype=dtype)), (n, cfg.d_model))


def _attention(x: Tensor, params: dict[str, Tensor], pre: str, cfg: ModelConfig,
               capture: list | None) -> Tensor:
    b, n, d = x.shape
    h = cfg.n_heads
    hd = d // h
    flat = T.reshape(x, (-1, d))

    def proj(name):
        z = T.add(T.matmul(flat, params[f"{pre}.{name}"]),
                  params[f"{pre}.{name}_b"])
        return T.transpose(T.reshape(z, (b, n, h, hd)), (0, 2, 1, 3))  # [b,h,n,hd]

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
    attn = T.softmax(scores, axis=-1)  # [b, h, n, n]
    if capture is not None:
        capture.append(attn.data.copy())
    ctx = T.matmul(attn, v)  # [b, h, n, hd]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (-1, d))
    out = T.add(T.matmul(ctx, params[f"{pre}.wo"]), params[f"{pre}.wo_b"])
    return T.reshape(out, (b, n, d))


def _mlp(x: Tensor, params: dict[str, Tensor], pre: str, cfg: ModelConfig) -> Tensor:
    b, n, d = x.shape
    flat = T.reshape(x, (-1, d))
    h = T.gelu(T.add(T.matmul(flat, params[f"{pre}.w1"]), params[f"{pre}.b1"]))
    out = T.add(T.matmul(h, params[f"{pre}.w2"]), params[f"{pre}.b2"])
    return T.reshape(out, (b, n, d))


def transformer_forward(
    tokens: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    capture_attention: bool = False,
) -> tuple[Tensor, list[np.ndarray] | None]:
    """Pre-LN encoder over [B, N+1, d] token batches (CLS already prepended).

    Returns (final-layer output after LN, optional per-layer attention)."""
    x = tokens
    attns: list[np.ndarray] | None = [] if capture_attention else None
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}"
        normed = T.layer_norm(x, params[f"{pre}.ln1.gamma"],
                              params[f"{pre}.ln1.beta"], eps=LN_EPS)
        x = T.add(x, _attention(normed, params, f"{pre}.attn", cfg, attns))
        normed = T.layer_norm(x, params[f"{pre}.ln2.gamma"],
                              params[f"{pre}.ln2.beta"], eps=LN_EPS)
        x = T.add(x, _mlp(normed, params, f"{pre}.mlp", cfg))
    x = T.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"],
                     eps=LN_EPS)
    return x, attns


def encode_batch(
    shapes: np.ndarray,  # [B, C, N, W]
    means: np.ndarray,  # [B, C, N]
    stds: np.ndarray,  # [B, C, N]
    params: dict[str, Tensor],
    cfg: ModelConfig,
    capture_attention: bool = False,
) -> tuple[Tensor, list[np.ndarray] | None]:
    """Batched encoder core: returns CLS representations [B, d_model]."""
    b, c, n, w = shapes.shape
    if n + 1 > cfg.max_tokens:
        raise ValueError(f"{n} windows exceed max_tokens={cfg.max_tokens}")
    dtype = T.get_default_dtype()
    tokens = _channel_tokens(
        Tensor(shapes, dtype=dtype), Tensor(means, dtype=dtype),
        Tensor(stds, dtype=dtype), params, cfg,
    )
    merged = merge_channels(tokens, params, cfg)  # [B, N, d]
    pe = sinusoidal_pe(n + 1, cfg.d_model).astype(dtype)
    merged = T.add(merged, Tensor(pe[1:], dtype=dtype))
    cls = T.add(T.reshape(params["cls"], (1, 1, cfg.d_model)),
                Tensor(pe[0].reshape(1, 1, -1), dtype=dtype))
    cls = T.broadcast_to(cls, (b, 1, cfg.d_model))
    x = T.concat([cls, merged], axis=1)  # [B, N+1, d]
    out, attns = transformer_forward(x, params, cfg,
                                     capture_attention=capture_attention)
    reps = T.reshape(out[:, 0, :], (b, cfg.d_model))
    return reps, attns


def grids_to_batch(grids: list[TokenGrid]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack equal-shape TokenGrids into batch arrays."""
    shapes = np.stack([g.shapes for g in grids])
    means = np.stack([g.means for g in grids])
    stds = np.stack([g.stds for g in grids])
    return shapes, means, stds


def encode(series: RawSeries, params: dict[str, Tensor],
           cfg: ModelConfig) -> Representation:
    """Full pipeline for one series (already sized to a multiple of W)."""
    grid = decompose(series, cfg.window_size)
    shapes, means, stds = grids_to_batch([grid])
    reps, _ = encode_batch(shapes, means, stds, params, cfg)
    return Representation(vector=T.reshape(reps, (cfg.d_model,)))


def classify_batch(
    shapes: np.ndarray, means: np.ndarray, stds: np.ndarray,
    params: dict[str, Tensor], cfg: ModelConfig,
) -> Tensor:
    """Logits [B, n_classes] from the 2-layer GELU MLP head."""
    if cfg.n_classes is None or "head.w1" not in params:
        raise ValueError("classification head is not configured")
    reps, _ = encode_batch(shapes, means, stds, params, cfg)
    h = T.gelu(T.add(T.matmul(reps, params["head.w1"]), params["head.b1"]))
    return T.add(T.matmul(h, params["head.w2"]), params["head.b2"])


def classify(series: RawSeries, params: dict[str, Tensor],
             cfg: ModelConfig) -> Tensor:
    """Logits [n_classes] for a single series."""
    grid = decompose(series, cfg.window_size)
    shapes, means, stds = grids_to_batch([grid])
    logits = classify_batch(shapes, means, stds, params, cfg)
    return T.reshape(logits, (cfg.n_classes,))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [B, K] logits against integer labels."""
    logp = T.log_softmax(logits, axis=-1)
    b = logits.shape[0]
    picked = logp[np.arange(b), np.asarray(labels)]
    return T.neg(T.tmean(picked))


def cls_attention(series: RawSeries, params: dict[str, Tensor],
                  cfg: ModelConfig) -> AttentionMap:
    """CLS-row attention (per layer, per head) for one series."""
    grid = decompose(series, cfg.window_size)
    shapes, means, stds = grids_to_batch([grid])
    _, attns = encode_batch(shapes, means, stds, params, cfg,
                            capture_attention=True)
    return AttentionMap(per_layer=[a[0, :, 0, :] for a in attns])
