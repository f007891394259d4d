"""BYOL self-supervised pretraining.

An online network (encoder + projector + predictor) is trained to predict
the projection of a momentum-averaged target network (encoder + projector,
no predictor, no gradients) on a second augmented view.  The only
augmentation is a random resized crop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, encode_batch, grids_to_batch, init_model_params
from .nme import LN_EPS
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import Tensor
from .tokenizer import RawSeries, decompose, random_resized_crop


class NanLossError(RuntimeError):
    """Training hit a NaN loss; carries a diagnostic state snapshot."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class ByolConfig:
    projector_hidden: int = 256
    projector_out: int = 64
    predictor_hidden: int = 256
    base_momentum: float = 0.99
    epochs: int = 100
    warmup_epochs: int = 10
    base_lr: float = 2e-3 * 64 / 2048
    batch_size: int = 64
    seed: int = 0
    crop_min_frac: float = 0.8
    crop_len: int = 512
    weight_decay: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.base_momentum <= 1.0):
            raise ValueError("base momentum must be in [0, 1]")
        if min(self.projector_hidden, self.projector_out,
               self.predictor_hidden) < 1:
            raise ValueError("head dimensions must be positive")


@dataclass
class SiameseState:
    online: dict[str, Tensor]
    target: dict[str, Tensor]  # encoder + projector copies, no gradients
    optimizer: OptimizerState
    step: int = 0


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    tau: float


@dataclass
class PretrainResult:
    params: dict[str, Tensor]  # online network (encoder + heads)
    model_config: ModelConfig
    byol_config: ByolConfig
    records: list[EpochRecord]
    final_projection_std: float


def _init_mlp_head(rng, prefix: str, d_in: int, d_hidden: int, d_out: int
                   ) -> dict[str, Tensor]:
    return {
        f"{prefix}.w1": T.parameter(rng.normal(0, 1 / math.sqrt(d_in),
                                               (d_in, d_hidden))),
        f"{prefix}.b1": T.parameter(np.zeros(d_hidden)),
        f"{prefix}.ln.gamma": T.parameter(np.ones(d_hidden)),
        f"{prefix}.ln.beta": T.parameter(np.zeros(d_hidden)),
        f"{prefix}.w2": T.parameter(rng.normal(0, 1 / math.sqrt(d_hidden),
                                               (d_hidden, d_out))),
        f"{prefix}.b2": T.parameter(np.zeros(d_out)),
    }


def _mlp_head(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    h = T.layer_norm(h, params[f"{prefix}.ln.gamma"],
                     params[f"{prefix}.ln.beta"], eps=LN_EPS)
    h = T.gelu(h)
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def init_siamese(model_cfg: ModelConfig, byol_cfg: ByolConfig,
                 rng: np.random.Generator) -> SiameseState:
    online = init_model_params(model_cfg, rng)
    online.update(_init_mlp_head(rng, "projector", model_cfg.d_model,
                                 byol_cfg.projector_hidden,
                                 byol_cfg.projector_out))
    online.update(_init_mlp_head(rng, "predictor", byol_cfg.projector_out,
                                 byol_cfg.predictor_hidden,
                                 byol_cfg.projector_out))
    target = {
        name: Tensor(p.data.copy(), requires_grad=False, dtype=p.data.dtype)
        for name, p in online.items()
        if not name.startswith("predictor.")
    }
    return SiameseState(online=online, target=target,
                        optimizer=OptimizerState(weight_decay=byol_cfg.weight_decay))


def byol_loss(online_prediction: Tensor, target_projection: Tensor) -> Tensor:
    """Mean over the batch of 2 - 2 cos(p_i, z_i); range [0, 4]."""
    p, z = online_prediction, target_projection
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {z.shape}")
    p_norm = T.sqrt(T.tsum(T.mul(p, p), axis=-1, keepdims=True))
    z_norm = np.linalg.norm(z.data, axis=-1, keepdims=True)
    if np.any(p_norm.data == 0.0) or np.any(z_norm == 0.0):
        raise ValueError("byol_loss received a zero-norm vector")
    p_unit = T.div(p, p_norm)
    z_unit = z.data / z_norm
    cos = T.tsum(T.mul(p_unit, Tensor(z_unit, dtype=p.data.dtype)), axis=-1)
    return T.sub(2.0, T.mul(T.tmean(cos), 2.0))


def symmetric_byol_loss(p1: Tensor, z2: Tensor, p2: Tensor, z1: Tensor) -> Tensor:
    """Average of the two view-assignment directions."""
    return T.mul(T.add(byol_loss(p1, z2), byol_loss(p2, z1)), 0.5)


def momentum_update(online: dict[str, Tensor], target: dict[str, Tensor],
                    tau: float) -> None:
    """target <- tau * target + (1 - tau) * online, in place."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError("tau must be in [0, 1]")
    for name, t in target.items():
        o = online[name]
        if o.data.shape != t.data.shape:
            raise ValueError(f"shape mismatch for '{name}'")
        t.data *= tau
        t.data += (1.0 - tau) * o.data


def momentum_at(byol_cfg: ByolConfig, step: int, total_steps: int) -> float:
    """Cosine increase from base momentum toward 1.0 over training."""
    if total_steps <= 0:
        return byol_cfg.base_momentum
    frac = step / total_steps
    return 1.0 - (1.0 - byol_cfg.base_momentum) * (math.cos(math.pi * frac) + 1) / 2


def _views_to_batch(views: list[RawSeries], window_size: int):
    grids = [decompose(v, window_size) for v in views]
    return grids_to_batch(grids)


def _forward_online(state, shapes, means, stds, model_cfg):
    reps, _ = encode_batch(shapes, means, stds, state.online, model_cfg)
    proj = _mlp_head(reps, state.online, "projector")
    return _mlp_head(proj, state.online, "predictor"), proj


def _forward_target(state, shapes, means, stds, model_cfg):
    with T.no_grad():
        reps, _ = encode_batch(shapes, means, stds, state.target, model_cfg)
        return _mlp_head(reps, state.target, "projector")


def projection_std(state: SiameseState, dataset: list[RawSeries],
                   model_cfg: ModelConfig, byol_cfg: ByolConfig,
                   seed: int = 0) -> float:
    """Collapse witness: mean per-dim std of L2-normalized online projections."""
    views = [
        random_resized_crop(s, seed + i, min_frac=1.0,
                            out_len=byol_cfg.crop_len)
        for i, s in enumerate(dataset[: byol_cfg.batch_size])
    ]
    shapes, means, stds = _views_to_batch(views, model_cfg.window_size)
    with T.no_grad():
        reps, _ = encode_batch(shapes, means, stds, state.online, model_cfg)
        proj = _mlp_head(reps, state.online, "projector").data
    unit = proj / np.linalg.norm(proj, axis=-1, keepdims=True)
    return float(unit.std(axis=0).mean())


def pretrain(
    dataset: list[RawSeries],
    model_cfg: ModelConfig,
    byol_cfg: ByolConfig,
    log_fn=None,
) -> PretrainResult:
    """Run the full BYOL loop; deterministic given the config seed."""
    if not dataset:
        raise ValueError("pretraining dataset is empty")
    for s in dataset:
        if s.n_channels != 1:
            raise ValueError(
                f"pretraining expects univariate series (got {s.n_channels} "
                f"channels in '{s.id}'); split multivariate data first"
            )
    if byol_cfg.crop_len % model_cfg.window_size != 0:
        raise ValueError("crop length must be a multiple of the window size")

    rng = np.random.default_rng(byol_cfg.seed)
    state = init_siamese(model_cfg, byol_cfg, rng)
    steps_per_epoch = max(1, len(dataset) // byol_cfg.batch_size)
    schedule = LrSchedule(byol_cfg.base_lr, byol_cfg.warmup_epochs,
                          byol_cfg.epochs, steps_per_epoch)
    total_steps = schedule.total_steps

    records: list[EpochRecord] = []
    for epoch in range(byol_cfg.epochs):
        perm = rng.permutation(len(dataset))
        losses = []
        lr = tau = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * byol_cfg.batch_size : (b + 1) * byol_cfg.batch_size]
            batch = [dataset[i] for i in idx]
            seeds = rng.integers(0, 2**31 - 1, size=(len(batch), 2))
            v1 = [random_resized_crop(s, int(seeds[i, 0]), byol_cfg.crop_min_frac,
                                      byol_cfg.crop_len)
                  for i, s in enumerate(batch)]
            v2 = [random_resized_crop(s, int(seeds[i, 1]), byol_cfg.crop_min_frac,
                                      byol_cfg.crop_len)
                  for i, s in enumerate(batch)]
            sh, mu, sd = _views_to_batch(v1 + v2, model_cfg.window_size)

            p_both, _ = _forward_online(state, sh, mu, sd, model_cfg)
            z_both = _forward_target(state, sh, mu, sd, model_cfg)
            n = len(batch)
            p1, p2 = p_both[:n], p_both[n:]
            z1, z2 = z_both.detach()[:n], z_both.detach()[n:]
            loss = symmetric_byol_loss(p1, z2, p2, z1)

            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NanLossError(
                    f"non-finite loss at epoch {epoch} step {b}",
                    diagnostics={
                        "epoch": epoch, "step": b,
                        "global_step": state.step,
                        "recent_losses": losses[-10:],
                        "lr": lr, "tau": tau,
                    },
                )
            T.zero_grads(state.online)
            T.backward(loss)
            grads = T.gradient_set(state.online)
            lr = lr_at(schedule, state.step + 1)
            adamw_step(state.online, grads, state.optimizer, lr)
            tau = momentum_at(byol_cfg, state.step, total_steps)
            momentum_update(state.online, state.target, tau)
            state.step += 1
            losses.append(loss_val)
        records.append(EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)),
                                   lr=lr, tau=tau))
        if log_fn is not None:
            log_fn(records[-1])

    proj_std = projection_std(state, dataset, model_cfg, byol_cfg,
                              seed=byol_cfg.seed)
    return PretrainResult(params=state.online, model_config=model_cfg,
                          byol_config=byol_cfg, records=records,
                          final_projection_std=proj_std)
