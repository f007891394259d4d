"""Window tokenization: decompose series into (shape, mean, std) triples.

A series is split into non-overlapping windows of size W.  Each window is
summarized by its arithmetic mean, its population std, and the normalized
shape (window - mean) / max(std, std_floor).  Constant windows get an
all-zero shape with the true (zero) std stored, so reconstruction is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_STD_FLOOR = 1e-5


@dataclass
class RawSeries:
    """A C x T multichannel series with an optional class label."""

    values: np.ndarray
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValueError("series values must be a C x T matrix")
        if self.values.shape[1] < 1:
            raise ValueError("series must have at least one timestep")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"series '{self.id}' contains non-finite values")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowToken:
    shape: np.ndarray  # length W, ~zero mean / unit std (zeros if constant)
    mean: float
    std: float


@dataclass
class TokenGrid:
    """Per-channel window tokens in array form: C x N windows of size W."""

    shapes: np.ndarray  # C x N x W
    means: np.ndarray  # C x N
    stds: np.ndarray  # C x N
    window_size: int
    std_floor: float = DEFAULT_STD_FLOOR

    @property
    def n_channels(self) -> int:
        return self.shapes.shape[0]

    @property
    def n_windows(self) -> int:
        return self.shapes.shape[1]

    def token(self, channel: int, window: int) -> WindowToken:
        return WindowToken(
            shape=self.shapes[channel, window],
            mean=float(self.means[channel, window]),
            std=float(self.stds[channel, window]),
        )


def decompose(
    series: RawSeries, window_size: int, std_floor: float = DEFAULT_STD_FLOOR
) -> TokenGrid:
    """Split into non-overlapping windows and normalize each by mean/std."""
    if window_size < 2:
        raise ValueError("window size must be >= 2")
    c, t = series.values.shape
    if t % window_size != 0:
        raise ValueError(
            f"length {t} not divisible by window size {window_size}; resize first"
        )
    n = t // window_size
    windows = series.values.reshape(c, n, window_size)
    means = windows.mean(axis=-1)
    stds = windows.std(axis=-1)  # population (1/W) std
    shapes = (windows - means[..., None]) / np.maximum(stds, std_floor)[..., None]
    # constant windows: zero shape, true (zero) std kept for exact round trip
    shapes = np.where(stds[..., None] <= 0.0, 0.0, shapes)
    return TokenGrid(
        shapes=shapes, means=means, stds=stds, window_size=window_size,
        std_floor=std_floor,
    )


def reconstruct(grid: TokenGrid) -> RawSeries:
    """Inverse of `decompose`: window = shape * max(std, floor) + mean."""
    scale = np.maximum(grid.stds, grid.std_floor)
    windows = grid.shapes * scale[..., None] + grid.means[..., None]
    c, n, w = windows.shape
    return RawSeries(values=windows.reshape(c, n * w))


def resize_linear(series: RawSeries, target_len: int) -> RawSeries:
    """Per-channel 1-D linear interpolation with endpoints preserved."""
    if target_len < 2:
        raise ValueError("target length must be >= 2")
    t = series.length
    if t == target_len:
        return RawSeries(series.values.copy(), label=series.label, id=series.id)
    if t == 1:
        values = np.repeat(series.values, target_len, axis=1)
        return RawSeries(values, label=series.label, id=series.id)
    src = np.linspace(0.0, 1.0, t)
    dst = np.linspace(0.0, 1.0, target_len)
    values = np.stack([np.interp(dst, src, ch) for ch in series.values])
    return RawSeries(values, label=series.label, id=series.id)


def random_resized_crop(
    series: RawSeries,
    rng_seed: int,
    min_frac: float = 0.8,
    out_len: int = 512,
) -> RawSeries:
    """Crop a uniform [min_frac, 1.0] fraction at a uniform start offset, then
    resize to `out_len`.  Deterministic given the seed."""
    if series.length < 2:
        raise ValueError("series too short to crop")
    rng = np.random.default_rng(rng_seed)
    t = series.length
    frac = rng.uniform(min_frac, 1.0)
    crop_len = max(2, int(round(frac * t)))
    crop_len = min(crop_len, t)
    start = int(rng.integers(0, t - crop_len + 1))
    cropped = RawSeries(
        series.values[:, start : start + crop_len],
        label=series.label,
        id=series.id,
    )
    return resize_linear(cropped, out_len)
