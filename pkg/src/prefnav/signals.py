"""Power-spectral-density features for inertial, proprioceptive and tactile streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from prefnav.errors import ConfigurationError

INERTIAL_RATE = 200.0
PROPRIO_RATE = 25.0
TACTILE_RATE = 25.0
WINDOW_S = 2.0
MIN_WINDOW_S = 0.5

INERTIAL_BINS = 64
PROPRIO_BINS = 16
TACTILE_BINS = 16

INERTIAL_CHANNELS = ("omega_x", "omega_y", "acc_z")
PROPRIO_CHANNELS = ("joint_pos_0", "joint_pos_1", "joint_vel_0", "joint_vel_1")
TACTILE_CHANNELS = ("contact", "foot_depth")

# (rate, bands per channel, channel count) for the three streams
STREAM_LAYOUT = (
    (INERTIAL_RATE, INERTIAL_BINS, len(INERTIAL_CHANNELS)),
    (PROPRIO_RATE, PROPRIO_BINS, len(PROPRIO_CHANNELS)),
    (TACTILE_RATE, TACTILE_BINS, len(TACTILE_CHANNELS)),
)
FEATURE_DIM = sum(b * c for _, b, c in STREAM_LAYOUT)


@dataclass
class TimeSeriesWindow:
    channels: np.ndarray  # C x T
    rate: float

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        if self.rate <= 0:
            raise ConfigurationError("sample rate must be positive")

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.rate


@dataclass
class PsdFeature:
    values: np.ndarray
    bins_per_channel: int
    channel_count: int

    def __post_init__(self):
        if self.values.shape != (self.bins_per_channel * self.channel_count,):
            raise ConfigurationError("PSD length must equal bins_per_channel * channel_count")

    def per_channel(self) -> np.ndarray:
        return self.values.reshape(self.channel_count, self.bins_per_channel)


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        # periodic Hann, the DFT-even form
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if kind in ("rect", "boxcar", "rectangular"):
        return np.ones(n)
    raise ConfigurationError(f"unknown window {kind!r}")


def periodogram(w: TimeSeriesWindow, nfft: int | None = None, window: str = "hann") -> PsdFeature:
    """One-sided periodogram per channel.

    Each channel is mean-detrended and tapered, then scaled so that the bins
    sum to the mean power of the tapered signal divided by the mean squared
    taper (with the rectangular taper this is exactly the time-domain mean
    power of the detrended signal). Returns ``nfft // 2 + 1`` bins per channel.
    """
    x = w.channels
    t = x.shape[1]
    if t < 2:
        raise ConfigurationError("a window needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("window contains non-finite samples")
    nfft = t if nfft is None else int(nfft)
    if nfft < t:
        raise ConfigurationError("nfft must be >= window length")
    taper = _window(window, t)
    y = (x - x.mean(axis=1, keepdims=True)) * taper
    spec = np.abs(np.fft.rfft(y, n=nfft, axis=1)) ** 2 / (nfft * np.sum(taper**2))
    if nfft % 2 == 0:
        spec[:, 1:-1] *= 2
    else:
        spec[:, 1:] *= 2
    return PsdFeature(values=spec.reshape(-1), bins_per_channel=spec.shape[1], channel_count=x.shape[0])


def psd_frequencies(rate: float, nfft: int) -> np.ndarray:
    return np.fft.rfftfreq(nfft, d=1.0 / rate)


def band_powers(psd: PsdFeature, rate: float, nfft: int, n_bands: int) -> PsdFeature:
    """Sum periodogram bins into ``n_bands`` equal-width bands on [0, Nyquist].

    Summing keeps total power, so windows of different length land on the
    same scale.
    """
    f = psd_frequencies(rate, nfft)
    band = np.minimum((f / (rate / 2) * n_bands).astype(np.int64), n_bands - 1)
    per = psd.per_channel()
    out = np.zeros((psd.channel_count, n_bands))
    for c in range(psd.channel_count):
        out[c] = np.bincount(band, weights=per[c], minlength=n_bands)
    return PsdFeature(values=out.reshape(-1), bins_per_channel=n_bands, channel_count=psd.channel_count)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int = FEATURE_DIM) -> "NormStats":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    @classmethod
    def fit(cls, raw_features: np.ndarray) -> "NormStats":
        raw_features = np.asarray(raw_features, dtype=np.float64)
        std = raw_features.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(mean=raw_features.mean(axis=0), std=std)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), std=np.asarray(d["std"], dtype=np.float64))


def _conform(w: TimeSeriesWindow, rate: float, n_channels: int) -> TimeSeriesWindow:
    if w.channels.shape[0] != n_channels:
        raise ConfigurationError(f"expected {n_channels} channels, got {w.channels.shape[0]}")
    if w.duration < MIN_WINDOW_S - 1e-9:
        raise ConfigurationError(f"stream of {w.duration:.3f} s is shorter than {MIN_WINDOW_S} s")
    if not np.all(np.isfinite(w.channels)):
        raise ConfigurationError("window contains non-finite samples")
    x = w.channels
    if w.rate != rate:
        t_src = np.arange(x.shape[1]) / w.rate
        n = int(np.floor(t_src[-1] * rate)) + 1
        t_dst = np.arange(n) / rate
        x = np.stack([np.interp(t_dst, t_src, ch) for ch in x])
    keep = int(round(WINDOW_S * rate))
    if x.shape[1] > keep:
        x = x[:, -keep:]
    return TimeSeriesWindow(x, rate)


def raw_ipt_feature(
    inertial: TimeSeriesWindow, proprio: TimeSeriesWindow, tactile: TimeSeriesWindow
) -> np.ndarray:
    parts = []
    for w, (rate, n_bands, n_ch) in zip((inertial, proprio, tactile), STREAM_LAYOUT):
        w = _conform(w, rate, n_ch)
        psd = periodogram(w)
        parts.append(band_powers(psd, rate, w.n_samples, n_bands).values)
    return np.concatenate(parts)


def make_ipt_feature(
    inertial: TimeSeriesWindow,
    proprio: TimeSeriesWindow,
    tactile: TimeSeriesWindow,
    stats: NormStats | None = None,
) -> np.ndarray:
    """Fixed-length standardized PSD vector for the IPT encoder."""
    raw = raw_ipt_feature(inertial, proprio, tactile)
    stats = stats or NormStats.identity(raw.size)
    return stats.apply(raw)
