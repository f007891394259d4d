"""Downstream protocols: fine-tuning, linear probing, few-shot episodes,
clustering, anomaly detection and the baseline input-encoding ablations.

Baseline encodings keep the Transformer trunk but replace the three-factor
window tokens with a plain linear+LayerNorm over (optionally normalized)
raw windows, which is how the scale-awareness of the full model is isolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.metrics import (
    adjusted_rand_score,
    normalized_mutual_info_score,
    roc_auc_score,
    silhouette_score,
)

from . import tensor as T
from .model import (
    ModelConfig,
    encode_batch,
    grids_to_batch,
    init_model_params,
    sinusoidal_pe,
    transformer_forward,
)
from .nme import LN_EPS
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import Tensor
from .tokenizer import RawSeries, decompose, resize_linear


class EncodingMode(str, Enum):
    NME = "nme"
    ZSCORE = "zscore"
    INSTANCE_NORM = "instance_norm"
    IDENTITY = "identity"


@dataclass
class Metrics:
    top1_accuracy: float
    macro_f1: float


@dataclass
class EpisodeSpec:
    n_shots: int = 5
    n_episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_shots < 1 or self.n_episodes < 1:
            raise ValueError("shots and episodes must be >= 1")


@dataclass
class ClusterMetrics:
    silhouette: float
    ari: float
    nmi: float


@dataclass
class AnomalyMetrics:
    precision: float
    recall: float
    f1: float
    auroc: float


@dataclass
class DatasetStats:
    mean: float
    std: float


# -- classification metrics -------------------------------------------------


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class F1; a class with P + R = 0 scores 0."""
    confusion = np.asarray(confusion)
    if confusion.size == 0:
        raise ValueError("empty confusion matrix")
    if np.any(confusion < 0):
        raise ValueError("confusion counts must be non-negative")
    k = confusion.shape[0]
    f1s = []
    for c in range(k):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return float(np.mean(f1s))


def metrics_from_predictions(y_true, y_pred, n_classes: int) -> Metrics:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    acc = float((y_true == y_pred).mean())
    return Metrics(top1_accuracy=acc,
                   macro_f1=macro_f1(confusion_matrix(y_true, y_pred, n_classes)))


# -- batch preparation ------------------------------------------------------


def target_length(t: int, window_size: int, cap: int = 512) -> int:
    """Resize target: the nearest multiple of W, capped at 512."""
    n = max(1, math.ceil(t / window_size))
    return min(cap, n * window_size)


def prepare_series(series: list[RawSeries], cfg: ModelConfig,
                   cap: int = 512) -> list[RawSeries]:
    """Resize everything to one common multiple-of-W length."""
    tmax = max(s.length for s in series)
    tlen = target_length(tmax, cfg.window_size, cap)
    return [resize_linear(s, tlen) for s in series]


def _preprocess(series: list[RawSeries], mode: EncodingMode,
                stats: DatasetStats | None) -> list[RawSeries]:
    if mode in (EncodingMode.NME, EncodingMode.IDENTITY):
        return series
    if mode == EncodingMode.ZSCORE:
        if stats is None:
            raise ValueError("zscore mode requires dataset stats")
        if stats.std == 0:
            raise ValueError("zscore dataset std is zero")
        return [RawSeries((s.values - stats.mean) / stats.std, s.label, s.id)
                for s in series]
    out = []
    for s in series:  # instance norm: per-sample standardization
        mu, sd = s.values.mean(), s.values.std()
        out.append(RawSeries((s.values - mu) / max(sd, 1e-12), s.label, s.id))
    return out


def _windows_batch(series: list[RawSeries], w: int) -> np.ndarray:
    """Raw non-overlapping windows [B, N, W] for univariate series."""
    return np.stack([s.values[0].reshape(-1, w) for s in series])


def _token_batch(series: list[RawSeries], w: int):
    grids = [decompose(s, w) for s in series]
    return grids_to_batch(grids)


# -- encoders (full model and baselines) ------------------------------------


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator,
                        mode: EncodingMode) -> dict[str, Tensor]:
    params = init_model_params(cfg, rng)
    if mode != EncodingMode.NME:
        w, d = cfg.window_size, cfg.d_model
        params["baseline_embed.w"] = T.parameter(
            rng.normal(0.0, 1.0 / math.sqrt(w), (w, d)))
        params["baseline_embed.b"] = T.parameter(np.zeros(d))
        params["baseline_embed.gamma"] = T.parameter(np.ones(d))
        params["baseline_embed.beta"] = T.parameter(np.zeros(d))
    return params


def baseline_encode(windows: np.ndarray, params: dict[str, Tensor],
                    cfg: ModelConfig) -> Tensor:
    """Linear+LN tokens from raw windows [B, N, W] -> [B, N, d] with positions."""
    b, n, w = windows.shape
    dtype = T.get_default_dtype()
    flat = T.reshape(Tensor(windows, dtype=dtype), (-1, w))
    z = T.add(T.matmul(flat, params["baseline_embed.w"]),
              params["baseline_embed.b"])
    tok = T.layer_norm(z, params["baseline_embed.gamma"],
                       params["baseline_embed.beta"], eps=LN_EPS)
    tok = T.reshape(tok, (b, n, cfg.d_model))
    pe = sinusoidal_pe(n + 1, cfg.d_model).astype(dtype)
    return T.add(tok, Tensor(pe[1:], dtype=dtype))


def _baseline_reps(windows: np.ndarray, params: dict[str, Tensor],
                   cfg: ModelConfig) -> Tensor:
    tokens = baseline_encode(windows, params, cfg)
    b = windows.shape[0]
    dtype = T.get_default_dtype()
    pe0 = sinusoidal_pe(1, cfg.d_model).astype(dtype)
    cls = T.add(T.reshape(params["cls"], (1, 1, cfg.d_model)),
                Tensor(pe0.reshape(1, 1, -1), dtype=dtype))
    x = T.concat([T.broadcast_to(cls, (b, 1, cfg.d_model)), tokens], axis=1)
    out, _ = transformer_forward(x, params, cfg)
    return T.reshape(out[:, 0, :], (b, cfg.d_model))


def _head(reps: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = T.gelu(T.add(T.matmul(reps, params["head.w1"]), params["head.b1"]))
    return T.add(T.matmul(h, params["head.w2"]), params["head.b2"])


def forward_logits(series: list[RawSeries], params: dict[str, Tensor],
                   cfg: ModelConfig, mode: EncodingMode,
                   stats: DatasetStats | None = None) -> Tensor:
    series = _preprocess(series, mode, stats)
    if mode == EncodingMode.NME:
        sh, mu, sd = _token_batch(series, cfg.window_size)
        reps, _ = encode_batch(sh, mu, sd, params, cfg)
    else:
        reps = _baseline_reps(_windows_batch(series, cfg.window_size),
                              params, cfg)
    return _head(reps, params)


def representations(series: list[RawSeries], params: dict[str, Tensor],
                    cfg: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Frozen-encoder CLS representations [B, d_model]."""
    series = prepare_series(series, cfg)
    out = []
    with T.no_grad():
        for i in range(0, len(series), batch_size):
            sh, mu, sd = _token_batch(series[i : i + batch_size],
                                      cfg.window_size)
            reps, _ = encode_batch(sh, mu, sd, params, cfg)
            out.append(reps.data)
    return np.concatenate(out, axis=0)


# -- fine-tuning ------------------------------------------------------------


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(logits.shape[0]), np.asarray(labels)]
    return T.neg(T.tmean(picked))


def _predict(series, params, cfg, mode, stats, batch_size=64) -> np.ndarray:
    preds = []
    with T.no_grad():
        for i in range(0, len(series), batch_size):
            logits = forward_logits(series[i : i + batch_size], params, cfg,
                                    mode, stats)
            preds.append(logits.data.argmax(axis=-1))
    return np.concatenate(preds)


def _copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {
        k: Tensor(v.data.copy(), requires_grad=v.requires_grad,
                  dtype=v.data.dtype)
        for k, v in params.items()
    }


@dataclass
class FinetuneResult:
    params: dict[str, Tensor]
    val_metrics: Metrics
    losses: list[float] = field(default_factory=list)


def finetune(
    params: dict[str, Tensor] | None,
    cfg: ModelConfig,
    train_set: list[RawSeries],
    val_set: list[RawSeries],
    epochs: int = 100,
    lr: float = 2e-4,
    batch_size: int = 16,
    seed: int = 0,
    mode: EncodingMode = EncodingMode.NME,
    stats: DatasetStats | None = None,
    max_steps: int | None = None,
) -> FinetuneResult:
    """Full-model cross-entropy training; returns best-on-validation params.

    `params=None` trains from scratch; otherwise the given (e.g. pretrained)
    parameters are the starting point and are not modified.
    """
    if cfg.n_classes is None:
        raise ValueError("model config must set n_classes for fine-tuning")
    labels = sorted({s.label for s in train_set})
    if len(labels) < 2:
        raise ValueError("training set contains a single class")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_encoder_params(cfg, rng, mode)
    else:
        params = _copy_params(params)
        if mode != EncodingMode.NME and "baseline_embed.w" not in params:
            params.update({
                k: v for k, v in
                init_encoder_params(cfg, rng, mode).items()
                if k.startswith("baseline_embed.")
            })
        if "head.w1" not in params:
            head = init_model_params(cfg, rng)
            params.update({k: v for k, v in head.items()
                           if k.startswith("head.")})

    train_set = prepare_series(train_set, cfg)
    val_set = prepare_series(val_set, cfg)
    y_val = np.array([s.label for s in val_set])

    def val_metrics(p) -> Metrics:
        preds = _predict(val_set, p, cfg, mode, stats)
        return metrics_from_predictions(y_val, preds, cfg.n_classes)

    best = _copy_params(params)
    best_metrics = val_metrics(params)
    if epochs == 0:
        return FinetuneResult(params=best, val_metrics=best_metrics)

    steps_per_epoch = max(1, len(train_set) // batch_size)
    schedule = LrSchedule(lr, 0, epochs, steps_per_epoch)
    opt = OptimizerState()
    losses: list[float] = []
    step = 0
    done = False
    for _ in range(epochs):
        if done:
            break
        perm = rng.permutation(len(train_set))
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            batch = [train_set[i] for i in idx]
            y = np.array([s.label for s in batch])
            logits = forward_logits(batch, params, cfg, mode, stats)
            loss = _cross_entropy(logits, y)
            losses.append(loss.item())
            T.zero_grads(params)
            T.backward(loss)
            grads = T.gradient_set(params)
            adamw_step(params, grads, opt, lr_at(schedule, step + 1))
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        m = val_metrics(params)
        if m.top1_accuracy >= best_metrics.top1_accuracy:
            best = _copy_params(params)
            best_metrics = m
    return FinetuneResult(params=best, val_metrics=best_metrics, losses=losses)


def evaluate(params: dict[str, Tensor], cfg: ModelConfig,
             test_set: list[RawSeries],
             mode: EncodingMode = EncodingMode.NME,
             stats: DatasetStats | None = None) -> Metrics:
    test_set = prepare_series(test_set, cfg)
    y = np.array([s.label for s in test_set])
    preds = _predict(test_set, params, cfg, mode, stats)
    return metrics_from_predictions(y, preds, cfg.n_classes)


def average_logits(params_list: list[dict[str, Tensor]], cfg: ModelConfig,
                   test_set: list[RawSeries],
                   mode: EncodingMode = EncodingMode.NME,
                   stats: DatasetStats | None = None) -> Metrics:
    """Ensemble by averaging logits of independently trained runs."""
    test_set = prepare_series(test_set, cfg)
    y = np.array([s.label for s in test_set])
    total = None
    with T.no_grad():
        for params in params_list:
            logits = forward_logits(test_set, params, cfg, mode, stats).data
            total = logits if total is None else total + logits
    return metrics_from_predictions(y, total.argmax(axis=-1), cfg.n_classes)


# -- linear probe -----------------------------------------------------------


def _train_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int,
                              seed: int, steps: int = 300,
                              lr: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-8
    xs = (x - mu) / sd
    w = T.parameter(rng.normal(0, 0.01, (x.shape[1], n_classes)))
    b = T.parameter(np.zeros(n_classes))
    params = {"w": w, "b": b}
    opt = OptimizerState(weight_decay=0.0)
    xt = Tensor(xs)
    for step in range(steps):
        logits = T.add(T.matmul(xt, w), b)
        loss = _cross_entropy(logits, y)
        T.zero_grads(params)
        T.backward(loss)
        adamw_step(params, T.gradient_set(params), opt, lr)
    return (w.data / sd[:, None], b.data - (mu / sd) @ w.data)


def linear_probe(params: dict[str, Tensor], cfg: ModelConfig,
                 train_set: list[RawSeries], test_set: list[RawSeries],
                 seed: int = 0) -> Metrics:
    """Single linear layer on frozen representations."""
    n_classes = len({s.label for s in train_set})
    x_train = representations(train_set, params, cfg)
    x_test = representations(test_set, params, cfg)
    y_train = np.array([s.label for s in train_set])
    y_test = np.array([s.label for s in test_set])
    w, b = _train_softmax_regression(x_train, y_train, n_classes, seed)
    preds = (x_test @ w + b).argmax(axis=-1)
    return metrics_from_predictions(y_test, preds, n_classes)


# -- few-shot ---------------------------------------------------------------


@dataclass
class FewShotResult:
    mean: Metrics
    std: Metrics
    per_episode: list[Metrics]


def few_shot_eval(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    train_set: list[RawSeries],
    test_set: list[RawSeries],
    spec: EpisodeSpec,
    finetune_steps: int = 50,
    finetune_lr: float = 2e-4,
) -> FewShotResult:
    """Sample n_shots per class, fine-tune briefly, evaluate on the query split."""
    by_class: dict[int, list[RawSeries]] = {}
    for s in train_set:
        by_class.setdefault(s.label, []).append(s)
    for cls, members in by_class.items():
        if len(members) < spec.n_shots:
            raise ValueError(
                f"class {cls} has {len(members)} samples, need {spec.n_shots}"
            )
    rng = np.random.default_rng(spec.seed)
    episodes: list[Metrics] = []
    for ep in range(spec.n_episodes):
        support: list[RawSeries] = []
        for cls in sorted(by_class):
            members = by_class[cls]
            idx = rng.choice(len(members), size=spec.n_shots, replace=False)
            support.extend(members[i] for i in idx)
        result = finetune(
            params, cfg, support, support,
            epochs=max(1, finetune_steps), lr=finetune_lr,
            batch_size=min(16, len(support)), seed=spec.seed + ep,
            max_steps=finetune_steps,
        )
        episodes.append(evaluate(result.params, cfg, test_set))
    accs = np.array([m.top1_accuracy for m in episodes])
    f1s = np.array([m.macro_f1 for m in episodes])
    return FewShotResult(
        mean=Metrics(float(accs.mean()), float(f1s.mean())),
        std=Metrics(float(accs.std()), float(f1s.std())),
        per_episode=episodes,
    )


# -- clustering -------------------------------------------------------------


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100
           ) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with farthest-point seeding; ties go to the lowest
    cluster index.  Returns (assignments, centers)."""
    x = np.asarray(x, dtype=np.float64)
    if k < 2:
        raise ValueError("k must be >= 2")
    distinct = np.unique(x, axis=0)
    if len(distinct) < k:
        raise ValueError(f"need at least {k} distinct points")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(len(x))]]
    while len(centers) < k:
        d2 = np.min(
            [((x - c) ** 2).sum(axis=-1) for c in centers], axis=0)
        centers.append(x[int(np.argmax(d2))])
    centers = np.stack(centers)
    assign = np.zeros(len(x), dtype=np.int64)
    for it in range(max_iter):
        dists = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        new_assign = dists.argmin(axis=-1)  # argmin takes the lowest index
        if it > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return assign, centers


def kmeans_inertia(x: np.ndarray, assign: np.ndarray,
                   centers: np.ndarray) -> float:
    return float(((x - centers[assign]) ** 2).sum())


def cluster_eval(reps: np.ndarray, labels: np.ndarray, k: int = 2,
                 seed: int = 0) -> ClusterMetrics:
    assign, _ = kmeans(reps, k, seed=seed)
    labels = np.asarray(labels)
    if len(set(assign)) < 2:
        sil = -1.0
    else:
        sil = float(silhouette_score(reps, assign))
    return ClusterMetrics(
        silhouette=sil,
        ari=float(adjusted_rand_score(labels, assign)),
        nmi=float(normalized_mutual_info_score(labels, assign)),
    )


# -- anomaly detection ------------------------------------------------------


def anomaly_scores(train_normal: np.ndarray, test: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the normal-class centroid; returns (train, test) scores."""
    if len(train_normal) == 0:
        raise ValueError("empty normal training set")
    centroid = train_normal.mean(axis=0)
    return (
        np.linalg.norm(train_normal - centroid, axis=-1),
        np.linalg.norm(test - centroid, axis=-1),
    )


def auroc(scores, labels) -> float:
    return float(roc_auc_score(np.asarray(labels), np.asarray(scores)))


def anomaly_eval(train_normal: np.ndarray, test: np.ndarray,
                 test_labels: np.ndarray, percentile: float = 95.0
                 ) -> AnomalyMetrics:
    """Centroid-distance scoring thresholded at a train-score percentile.

    (Stands in for the one-class SVM of the reference protocol.)"""
    train_scores, test_scores = anomaly_scores(train_normal, test)
    threshold = np.percentile(train_scores, percentile)
    pred = (test_scores > threshold).astype(np.int64)
    y = np.asarray(test_labels)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return AnomalyMetrics(precision=precision, recall=recall, f1=f1,
                          auroc=auroc(test_scores, y))
