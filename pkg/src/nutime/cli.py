"""Command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure
(NaN abort).  `--threads 1` enables the strict deterministic mode; the
NUTIME_THREADS environment variable is the fallback for `--threads`.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .byol import ByolConfig, NanLossError, pretrain
from .data import (
    DataError,
    DatasetManifest,
    SynthSpec,
    config_hash,
    generate_synth,
    load_checkpoint,
    load_ucr_tsv,
    params_from_arrays,
    save_checkpoint,
    split_multivariate,
)
from .evaluate import (
    DatasetStats,
    EncodingMode,
    EpisodeSpec,
    anomaly_eval,
    average_logits,
    cluster_eval,
    evaluate,
    few_shot_eval,
    finetune,
    representations,
)
from .model import ModelConfig, cls_attention
from .tensor import NonFiniteError
from .tokenizer import resize_linear


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_global_flags(p: _Parser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap; 1 = strict deterministic mode")
    p.add_argument("--f64", action="store_true",
                   help="run in float64 verification mode")


def build_parser() -> _Parser:
    parser = _Parser(prog="nutime", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--spec", required=False, help="JSON generator spec")
    p.add_argument("--out", required=True, help="output directory")
    _add_global_flags(p)

    p = sub.add_parser("pretrain", help="BYOL self-supervised pretraining")
    p.add_argument("--config", help="JSON run config (model/byol sections)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--max-len", type=int,
                   help="drop series longer than this many steps")
    _add_global_flags(p)

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    p.add_argument("--ckpt", help="pretrained checkpoint (omit: from scratch)")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="fine-tuned checkpoint path")
    p.add_argument("--metrics", required=True, help="metrics CSV path")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--mode", default="nme",
                   choices=[m.value for m in EncodingMode])
    p.add_argument("--ensemble", type=int, default=1,
                   help="average test logits over this many runs")
    _add_global_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metrics", required=True)
    _add_global_flags(p)

    p = sub.add_parser("fewshot", help="episodic few-shot evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--metrics", help="metrics CSV path")
    _add_global_flags(p)

    p = sub.add_parser("cluster", help="K-means over representations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--metrics", help="metrics CSV path")
    _add_global_flags(p)

    p = sub.add_parser("anomaly", help="centroid-distance anomaly detection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--normal", required=True, help="TSV of normal samples")
    p.add_argument("--test", required=True, help="TSV with 0/1 labels")
    p.add_argument("--metrics", help="metrics CSV path")
    _add_global_flags(p)

    p = sub.add_parser("embed", help="dump series representations to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="TSV input file")
    p.add_argument("--out", required=True, help="output CSV path")
    _add_global_flags(p)

    p = sub.add_parser("attn", help="dump CLS attention scores to JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="TSV input file")
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--index", type=int, default=0,
                   help="which series in the input file")
    _add_global_flags(p)

    return parser


# -- helpers ----------------------------------------------------------------


def _thread_limit(threads: int | None):
    if threads is None:
        env = os.environ.get("NUTIME_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc


def _build_configs(config_file: dict, args) -> tuple[ModelConfig, ByolConfig]:
    known = {"model", "byol"}
    unknown = set(config_file) - known
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    try:
        model_cfg = ModelConfig.from_dict(config_file.get("model", {}))
        byol_cfg = ByolConfig(**config_file.get("byol", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    byol_cfg.seed = args.seed
    for flag, attr in (("epochs", "epochs"), ("batch_size", "batch_size"),
                       ("base_lr", "base_lr")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(byol_cfg, attr, value)
    return model_cfg, byol_cfg


def _load_dataset_dir(data_dir: str, split: str = "train"):
    path = Path(data_dir)
    manifest_path = path / "manifest.json"
    if manifest_path.exists():
        manifest = DatasetManifest.load(manifest_path)
        split_path = getattr(manifest, f"{split}_path")
        return load_ucr_tsv(split_path), manifest
    tsvs = sorted(path.glob("*.tsv"))
    if not tsvs:
        raise DataError(f"no manifest.json or .tsv files in {data_dir}")
    series = []
    for tsv in tsvs:
        series.extend(load_ucr_tsv(tsv))
    return series, None


def _load_model(ckpt_path: str, n_classes: int | None = None):
    arrays, meta = load_checkpoint(ckpt_path)
    cfg = ModelConfig.from_dict(meta["model"])
    if n_classes is not None:
        cfg.n_classes = n_classes
    params = params_from_arrays(arrays)
    return params, cfg, meta


def _append_metrics(path: str, command: str, rows: list[tuple[str, float]],
                    cfg_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["command", "metric", "value", "config_hash"])
        for name, value in rows:
            writer.writerow([command, name, f"{value:.6f}", cfg_hash])


def _resolved(args) -> dict:
    # output destinations are excluded so reruns of the same experiment
    # produce byte-identical checkpoints regardless of where they land
    skip = {"command", "out", "metrics"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -- subcommand implementations ---------------------------------------------


def _cmd_synth(args) -> int:
    spec_dict = _load_json(args.spec) if args.spec else {}
    try:
        spec = SynthSpec.from_dict({"seed": args.seed, **spec_dict}) \
            if spec_dict else SynthSpec(seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth spec: {exc}") from exc
    manifest = generate_synth(spec, args.out)
    print(f"wrote {manifest.name} dataset to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    config_file = _load_json(args.config) if args.config else {}
    model_cfg, byol_cfg = _build_configs(config_file, args)
    series, _ = _load_dataset_dir(args.data, "train")
    if args.max_len is not None:
        series = [s for s in series if s.length <= args.max_len]
    flat = []
    for s in series:
        flat.extend(split_multivariate(s) if s.n_channels > 1 else [s])
    run_config = {"command": "pretrain", "resolved": _resolved(args),
                  "model": model_cfg.to_dict(),
                  "byol": dict(byol_cfg.__dict__)}
    print(f"resolved config: {json.dumps(run_config, sort_keys=True)}")

    result = pretrain(flat, model_cfg, byol_cfg,
                      log_fn=lambda r: print(
                          f"epoch {r.epoch}: loss={r.mean_loss:.4f} "
                          f"lr={r.lr:.2e} tau={r.tau:.4f}"))

    out = Path(args.out)
    save_checkpoint(result.params, {"model": model_cfg.to_dict(),
                                    "run_config": run_config}, out)
    loss_csv = out.with_suffix(".losses.csv")
    with open(loss_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr", "tau"])
        for r in result.records:
            writer.writerow([r.epoch, f"{r.mean_loss:.8f}", f"{r.lr:.8e}",
                             f"{r.tau:.8f}"])
    from .report import save_loss_curve

    save_loss_curve(result.records, out.with_suffix(".losses.png"))
    print(f"wrote checkpoint {out}, loss log {loss_csv}")
    print(f"final projection std: {result.final_projection_std:.6f}")
    return 0


def _cmd_finetune(args) -> int:
    train = load_ucr_tsv(args.train)
    val = load_ucr_tsv(args.val)
    test = load_ucr_tsv(args.test)
    n_classes = len({s.label for s in train})
    mode = EncodingMode(args.mode)
    if args.ckpt:
        params, cfg, _ = _load_model(args.ckpt, n_classes=n_classes)
    else:
        params, cfg = None, ModelConfig(n_classes=n_classes)
    stats = None
    if mode == EncodingMode.ZSCORE:
        values = np.concatenate([s.values.ravel() for s in train])
        stats = DatasetStats(mean=float(values.mean()), std=float(values.std()))

    runs = []
    for run in range(args.ensemble):
        result = finetune(params, cfg, train, val, epochs=args.epochs,
                          lr=args.lr, batch_size=args.batch_size,
                          seed=args.seed + run, mode=mode, stats=stats)
        runs.append(result)
    test_metrics = average_logits([r.params for r in runs], cfg, test,
                                  mode=mode, stats=stats)

    run_config = {"command": "finetune", "resolved": _resolved(args),
                  "model": cfg.to_dict()}
    chash = config_hash(run_config)
    save_checkpoint(runs[0].params, {"model": cfg.to_dict(),
                                     "run_config": run_config}, args.out)
    _append_metrics(args.metrics, "finetune",
                    [("top1_accuracy", test_metrics.top1_accuracy),
                     ("macro_f1", test_metrics.macro_f1)], chash)
    print(f"test accuracy {test_metrics.top1_accuracy:.4f}, "
          f"macro-F1 {test_metrics.macro_f1:.4f}")
    return 0


def _cmd_eval(args) -> int:
    test = load_ucr_tsv(args.test)
    n_classes = len({s.label for s in test})
    params, cfg, meta = _load_model(args.ckpt, n_classes=n_classes)
    if "head.w1" not in params:
        raise DataError(
            f"{args.ckpt}: checkpoint has no classification head; "
            "run finetune first")
    m = evaluate(params, cfg, test)
    chash = config_hash({"command": "eval", "resolved": _resolved(args)})
    _append_metrics(args.metrics, "eval",
                    [("top1_accuracy", m.top1_accuracy),
                     ("macro_f1", m.macro_f1)], chash)
    print(f"test accuracy {m.top1_accuracy:.4f}, macro-F1 {m.macro_f1:.4f}")
    return 0


def _cmd_fewshot(args) -> int:
    train, manifest = _load_dataset_dir(args.data, "train")
    test, _ = _load_dataset_dir(args.data, "test") if manifest else (train, None)
    n_classes = len({s.label for s in train})
    params, cfg, _ = _load_model(args.ckpt, n_classes=n_classes)
    spec = EpisodeSpec(n_shots=args.shots, n_episodes=args.episodes,
                       seed=args.seed)
    result = few_shot_eval(params, cfg, train, test, spec)
    print(f"few-shot accuracy {result.mean.top1_accuracy:.4f} "
          f"± {result.std.top1_accuracy:.4f} over {args.episodes} episodes")
    if args.metrics:
        chash = config_hash({"command": "fewshot", "resolved": _resolved(args)})
        _append_metrics(args.metrics, "fewshot",
                        [("mean_accuracy", result.mean.top1_accuracy),
                         ("std_accuracy", result.std.top1_accuracy),
                         ("mean_macro_f1", result.mean.macro_f1)], chash)
    return 0


def _cmd_cluster(args) -> int:
    series, _ = _load_dataset_dir(args.data, "test")
    params, cfg, _ = _load_model(args.ckpt)
    reps = representations(series, params, cfg)
    labels = np.array([s.label for s in series])
    m = cluster_eval(reps, labels, k=args.k, seed=args.seed)
    print(f"silhouette {m.silhouette:.4f}, ARI {m.ari:.4f}, NMI {m.nmi:.4f}")
    if args.metrics:
        chash = config_hash({"command": "cluster", "resolved": _resolved(args)})
        _append_metrics(args.metrics, "cluster",
                        [("silhouette", m.silhouette), ("ari", m.ari),
                         ("nmi", m.nmi)], chash)
    return 0


def _cmd_anomaly(args) -> int:
    normal = load_ucr_tsv(args.normal)
    test = load_ucr_tsv(args.test)
    params, cfg, _ = _load_model(args.ckpt)
    normal_reps = representations(normal, params, cfg)
    test_reps = representations(test, params, cfg)
    labels = np.array([s.label for s in test])
    m = anomaly_eval(normal_reps, test_reps, labels)
    print(f"precision {m.precision:.4f}, recall {m.recall:.4f}, "
          f"F1 {m.f1:.4f}, AUROC {m.auroc:.4f}")
    if args.metrics:
        chash = config_hash({"command": "anomaly", "resolved": _resolved(args)})
        _append_metrics(args.metrics, "anomaly",
                        [("precision", m.precision), ("recall", m.recall),
                         ("f1", m.f1), ("auroc", m.auroc)], chash)
    return 0


def _cmd_embed(args) -> int:
    series = load_ucr_tsv(args.input)
    params, cfg, _ = _load_model(args.ckpt)
    reps = representations(series, params, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, reps, delimiter=",", fmt="%.8e")
    from .report import save_embedding_scatter

    labels = [s.label for s in series]
    save_embedding_scatter(reps, labels if any(l is not None for l in labels)
                           else None, out.with_suffix(".png"))
    print(f"wrote {len(series)} x {cfg.d_model} embeddings to {out}")
    return 0


def _cmd_attn(args) -> int:
    series = load_ucr_tsv(args.input)
    if not (0 <= args.index < len(series)):
        raise UsageError(f"--index {args.index} out of range "
                         f"(file has {len(series)} series)")
    params, cfg, _ = _load_model(args.ckpt)
    from .evaluate import prepare_series

    s = prepare_series([series[args.index]], cfg)[0]
    amap = cls_attention(s, params, cfg)
    payload = {
        f"layer_{li}": {
            f"head_{hi}": [float(v) for v in head_row[1:]]  # patch scores
            for hi, head_row in enumerate(layer)
        }
        for li, layer in enumerate(amap.per_layer)
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    from .report import save_attention_figure

    save_attention_figure(s.values, amap.patch_scores, cfg.window_size,
                          out.with_suffix(".png"))
    print(f"wrote attention scores to {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "fewshot": _cmd_fewshot,
    "cluster": _cmd_cluster,
    "anomaly": _cmd_anomaly,
    "embed": _cmd_embed,
    "attn": _cmd_attn,
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        if args.f64:
            T.set_default_dtype(np.float64)
        with _thread_limit(args.threads):
            return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NanLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        print(f"diagnostics: {json.dumps(exc.diagnostics, default=str)}",
              file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    finally:
        T.set_default_dtype(np.float32)


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
