"""Dataset loading, synthetic data generation and checkpoint serialization.

Input format is label-first tab-separated text (one series per line, as in
the UCR archive).  Checkpoints are a small binary container: magic "NUTM",
a version, a UTF-8 JSON metadata block, a tensor directory and contiguous
little-endian float32 payloads.  Round trips are bitwise identities.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import RawSeries

CHECKPOINT_MAGIC = b"NUTM"
CHECKPOINT_VERSION = 1


class DataError(Exception):
    """Malformed input data or checkpoint file."""


# -- TSV ingestion ----------------------------------------------------------


def load_ucr_tsv(path: str | Path) -> list[RawSeries]:
    """Parse a label-first TSV file into univariate series.

    Labels are remapped to 0..K-1 preserving their sorted original order.
    Ragged rows and parse failures raise DataError naming the line.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    raw_rows: list[tuple[float, np.ndarray]] = []
    expected_len: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise DataError(f"{path}:{lineno}: need a label and values")
            try:
                label = float(fields[0])
                values = np.array([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: parse failure: {exc}") from exc
            if not np.all(np.isfinite(values)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if expected_len is None:
                expected_len = len(values)
            elif len(values) != expected_len:
                raise DataError(
                    f"{path}:{lineno}: row has {len(values)} values, "
                    f"expected {expected_len}"
                )
            raw_rows.append((label, values))
    if not raw_rows:
        raise DataError(f"{path}: empty file")
    label_map = {lab: i for i, lab in enumerate(sorted({r[0] for r in raw_rows}))}
    return [
        RawSeries(values=vals[None, :], label=label_map[lab],
                  id=f"{path.stem}:{i}")
        for i, (lab, vals) in enumerate(raw_rows)
    ]


def split_multivariate(series: RawSeries) -> list[RawSeries]:
    """One univariate series per channel, id suffixed with the channel index."""
    return [
        RawSeries(values=series.values[c : c + 1].copy(), label=series.label,
                  id=f"{series.id}/ch{c}")
        for c in range(series.n_channels)
    ]


# -- dataset manifest -------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    n_channels: int
    n_classes: int
    train_path: str
    val_path: str
    test_path: str
    mean: float = 0.0  # dataset stats for z-score encoding
    std: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            return DatasetManifest(**json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- synthetic multi-scale dataset ------------------------------------------

SHAPE_FAMILIES = ("sine", "square", "sawtooth")


@dataclass
class SynthSpec:
    """Generator spec for the desk-scale multi-scale dataset.

    In "scale" mode classes share shape families and differ only in the
    per-window mean magnitude 10^s_k * U[0.5, 1.5]; in "shape" mode classes
    share exponents and differ only in shape family.
    """

    n_classes: int = 2
    samples_per_class: int = 128
    length: int = 512
    scale_exponents: tuple[float, ...] = (-2.0, 2.0)
    shape_families: tuple[str, ...] = ("sine", "sine")
    mode: str = "scale"  # "scale" | "shape"
    noise_level: float = 0.1
    rel_amplitude: float = 0.3
    window_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.length % 16 != 0:
            raise ValueError("length must be divisible by 16")
        if self.mode not in ("scale", "shape"):
            raise ValueError("mode must be 'scale' or 'shape'")
        if len(self.scale_exponents) != self.n_classes:
            raise ValueError("need one scale exponent per class")
        if len(self.shape_families) != self.n_classes:
            raise ValueError("need one shape family per class")
        for fam in self.shape_families:
            if fam not in SHAPE_FAMILIES:
                raise ValueError(f"unknown shape family '{fam}'")
        if any(abs(e) > 4 for e in self.scale_exponents):
            raise ValueError("scale exponents must lie within [-4, 4]")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["scale_exponents"] = list(self.scale_exponents)
        d["shape_families"] = list(self.shape_families)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("scale_exponents", "shape_families"):
            if key in d:
                d[key] = tuple(d[key])
        return SynthSpec(**d)


def _prototype(family: str, t: np.ndarray) -> np.ndarray:
    if family == "sine":
        return np.sin(2 * np.pi * t)
    if family == "square":
        return np.sign(np.sin(2 * np.pi * t))
    return 2.0 * (t % 1.0) - 1.0  # sawtooth


def _synth_sample(spec: SynthSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    w = spec.window_size
    n_windows = spec.length // w
    exponent = spec.scale_exponents[cls]
    family = spec.shape_families[cls]
    phase = rng.uniform(0.0, 1.0)
    freq = rng.uniform(1.0, 3.0)
    t = (np.arange(spec.length) / spec.length) * freq + phase
    proto = _prototype(family, t)
    noise = rng.normal(0.0, spec.noise_level, spec.length)
    wave = (proto + noise).reshape(n_windows, w)
    wave -= wave.mean(axis=-1, keepdims=True)  # window means stay exact below
    mean_scale = 10.0**exponent * rng.uniform(0.5, 1.5, n_windows)
    windows = mean_scale[:, None] * (1.0 + spec.rel_amplitude * wave)
    return windows.reshape(1, spec.length)


def generate_synth_series(
    spec: SynthSpec, split: str, n_per_class: int | None = None
) -> list[RawSeries]:
    """Deterministic sample list for one split (train/val/test)."""
    split_offset = {"train": 0, "val": 1, "test": 2}[split]
    n = n_per_class if n_per_class is not None else spec.samples_per_class
    out = []
    for cls in range(spec.n_classes):
        rng = np.random.default_rng([spec.seed, split_offset, cls])
        for i in range(n):
            out.append(
                RawSeries(values=_synth_sample(spec, cls, rng), label=cls,
                          id=f"synth-{split}-c{cls}-{i}")
            )
    return out


def _write_tsv(path: Path, series: list[RawSeries]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in series:
            vals = "\t".join(repr(float(v)) for v in s.values[0])
            fh.write(f"{s.label}\t{vals}\n")


def generate_synth(spec: SynthSpec, out_dir: str | Path) -> DatasetManifest:
    """Write train/val/test TSVs plus a manifest for the synthetic dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": generate_synth_series(spec, "train"),
        "val": generate_synth_series(spec, "val",
                                     max(4, spec.samples_per_class // 4)),
        "test": generate_synth_series(spec, "test",
                                      max(4, spec.samples_per_class // 4)),
    }
    for name, series in splits.items():
        _write_tsv(out_dir / f"{name}.tsv", series)
    all_train = np.concatenate([s.values.ravel() for s in splits["train"]])
    manifest = DatasetManifest(
        name=f"synth-{spec.mode}",
        n_channels=1,
        n_classes=spec.n_classes,
        train_path=str(out_dir / "train.tsv"),
        val_path=str(out_dir / "val.tsv"),
        test_path=str(out_dir / "test.tsv"),
        mean=float(all_train.mean()),
        std=float(all_train.std()),
    )
    manifest.save(out_dir / "manifest.json")
    with open(out_dir / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# -- checkpoint container ---------------------------------------------------


def save_checkpoint(params: dict[str, Tensor | np.ndarray], config: dict,
                    path: str | Path) -> None:
    """Serialize named parameter tensors plus a config metadata block."""
    path = Path(path)
    meta = json.dumps(config, sort_keys=True).encode("utf-8")
    names = sorted(params.keys())
    directory = bytearray()
    payload = bytearray()
    for name in names:
        arr = params[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        offset = len(payload)
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<BB", 0, arr.ndim)  # dtype tag 0 = f32
        directory += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        directory += struct.pack("<QQ", offset, arr.nbytes)
        payload += arr.tobytes()
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<Q", len(meta))
        + meta
        + struct.pack("<I", len(names))
        + bytes(directory)
        + bytes(payload)
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; any malformation raises DataError."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataError(f"{path}: truncated while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    (meta_len,) = struct.unpack("<Q", take(8, "metadata length"))
    try:
        config = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt metadata block: {exc}") from exc
    (n_entries,) = struct.unpack("<I", take(4, "directory size"))
    entries = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype_tag, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if dtype_tag != 0:
            raise DataError(f"{path}: unknown dtype tag {dtype_tag} for '{name}'")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        offset, nbytes = struct.unpack("<QQ", take(16, "offset/size"))
        entries.append((name, shape, offset, nbytes))
    payload = blob[pos:]
    params: dict[str, np.ndarray] = {}
    claimed: list[tuple[int, int]] = []
    for name, shape, offset, nbytes in entries:
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if nbytes != expected:
            raise DataError(f"{path}: size mismatch for tensor '{name}'")
        if offset + nbytes > len(payload):
            raise DataError(f"{path}: tensor '{name}' payload out of bounds")
        for o, n in claimed:
            if offset < o + n and o < offset + nbytes:
                raise DataError(f"{path}: overlapping payload for '{name}'")
        claimed.append((offset, nbytes))
        arr = np.frombuffer(payload[offset : offset + nbytes],
                            dtype="<f4").reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{path}: non-finite values in tensor '{name}'")
        params[name] = arr.copy()
    return params, config


def params_from_arrays(arrays: dict[str, np.ndarray],
                       requires_grad: bool = True) -> dict[str, Tensor]:
    dtype = T.get_default_dtype()
    return {
        name: Tensor(arr, requires_grad=requires_grad, dtype=dtype)
        for name, arr in arrays.items()
    }


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()[:16]
