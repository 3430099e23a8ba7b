import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prefnav.errors import ConfigurationError
from prefnav.signals import (
    FEATURE_DIM,
    NormStats,
    TimeSeriesWindow,
    band_powers,
    make_ipt_feature,
    periodogram,
    raw_ipt_feature,
)


def windows(rng, seconds=2.0, scale=1.0):
    return (
        TimeSeriesWindow(rng.normal(size=(3, int(200 * seconds))) * scale, 200.0),
        TimeSeriesWindow(rng.normal(size=(4, int(25 * seconds))) * scale, 25.0),
        TimeSeriesWindow(rng.normal(size=(2, int(25 * seconds))) * scale, 25.0),
    )


def dft_power(x: np.ndarray) -> np.ndarray:
    """Independent one-sided rectangular periodogram via an explicit DFT matrix."""
    t = len(x)
    y = x - x.mean()
    k = np.arange(t // 2 + 1)[:, None]
    n = np.arange(t)[None, :]
    mag2 = np.abs(np.exp(-2j * np.pi * k * n / t) @ y) ** 2 / t**2
    mag2[1 : (t + 1) // 2] *= 2
    return mag2


def test_feature_dim():
    assert FEATURE_DIM == 3 * 64 + 4 * 16 + 2 * 16 == 288


def test_constant_signal_is_zero():
    f = periodogram(TimeSeriesWindow(np.full((2, 400), 3.7), 200.0))
    np.testing.assert_allclose(f.values, 0.0, atol=1e-20)


def test_sinusoid_peaks_at_its_bin():
    t = np.arange(400)
    x = np.sin(2 * np.pi * 4 * t / 400)
    for window in ("hann", "rect"):
        f = periodogram(TimeSeriesWindow(x, 200.0), window=window)
        assert np.argmax(f.values) == 4


def test_matches_explicit_dft():
    rng = np.random.default_rng(0)
    for t in (64, 65, 400):
        x = rng.normal(size=t)
        got = periodogram(TimeSeriesWindow(x, 100.0), window="rect").values
        np.testing.assert_allclose(got, dft_power(x), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("t", [400, 401, 50])
def test_parseval_rectangular(t):
    rng = np.random.default_rng(t)
    x = rng.normal(size=t)
    f = periodogram(TimeSeriesWindow(x, 200.0), window="rect")
    assert abs(f.values.sum() - np.mean((x - x.mean()) ** 2)) <= 1e-6


def test_band_powers_keep_total():
    rng = np.random.default_rng(2)
    w = TimeSeriesWindow(rng.normal(size=(3, 400)), 200.0)
    psd = periodogram(w)
    bands = band_powers(psd, 200.0, 400, 64)
    np.testing.assert_allclose(bands.per_channel().sum(1), psd.per_channel().sum(1), rtol=1e-12)
    assert bands.values.shape == (192,)


def test_feature_shape_and_nonnegative():
    f = raw_ipt_feature(*windows(np.random.default_rng(0)))
    assert f.shape == (288,)
    assert np.all(f >= 0)


def test_zero_streams_identity_stats():
    z = (
        TimeSeriesWindow(np.zeros((3, 400)), 200.0),
        TimeSeriesWindow(np.zeros((4, 50)), 25.0),
        TimeSeriesWindow(np.zeros((2, 50)), 25.0),
    )
    np.testing.assert_array_equal(make_ipt_feature(*z, NormStats.identity()), np.zeros(288))


def test_circular_shift_invariance_for_spaced_harmonics():
    """Periodic inputs whose harmonics are at least three bins apart survive the Hann taper exactly."""
    rng = np.random.default_rng(3)
    for _ in range(20):

        def periodic(c, t):
            bins = rng.choice(np.arange(3, t // 2 - 3, 3), size=3, replace=False)
            n = np.arange(t)
            return np.stack(
                [sum(rng.uniform(0.2, 2) * np.cos(2 * np.pi * b * n / t + rng.uniform(0, 6.3)) for b in bins) for _ in range(c)]
            )

        ws = [periodic(3, 400), periodic(4, 50), periodic(2, 50)]
        rates = (200.0, 25.0, 25.0)
        base = make_ipt_feature(*(TimeSeriesWindow(x, r) for x, r in zip(ws, rates)))
        shifted = make_ipt_feature(*(TimeSeriesWindow(np.roll(x, 37, axis=1), r) for x, r in zip(ws, rates)))
        assert np.max(np.abs(base - shifted)) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 96), elements=st.floats(-1e3, 1e3)), st.integers(0, 95))
def test_rect_shift_invariance_any_periodic(x, shift):
    """With the rectangular taper every T-periodic input gives identical spectra after a circular shift."""
    a = periodogram(TimeSeriesWindow(x, 25.0), window="rect").values
    b = periodogram(TimeSeriesWindow(np.roll(x, shift, axis=1), 25.0), window="rect").values
    assert np.max(np.abs(a - b)) <= 1e-6 * max(1.0, np.abs(a).max())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 400), elements=st.floats(-50, 50)))
def test_nonnegative_property(x):
    assert np.all(periodogram(TimeSeriesWindow(x, 200.0)).values >= 0)


def test_short_window_rescaled_consistently():
    """A 1.5 s and a 2 s window of one stationary process give nearly parallel features."""
    from prefnav.simworld import default_terrains, synth_ipt

    spec = default_terrains()[1]
    cos = []
    for seed in range(100):
        streams = synth_ipt(spec, 2.0, seed)
        short = [TimeSeriesWindow(w.channels[:, : int(1.5 * w.rate)], w.rate) for w in streams]
        a, b = raw_ipt_feature(*streams), raw_ipt_feature(*short)
        cos.append(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    assert min(cos) >= 0.95


def test_resampled_stream():
    rng = np.random.default_rng(9)
    inertial, proprio, tactile = windows(rng)
    fast = TimeSeriesWindow(np.repeat(proprio.channels, 2, axis=1), 50.0)
    assert raw_ipt_feature(inertial, fast, tactile).shape == (288,)


def test_longer_window_uses_most_recent_two_seconds():
    rng = np.random.default_rng(4)
    inertial, proprio, tactile = windows(rng, seconds=3.0)
    tail = [TimeSeriesWindow(w.channels[:, -int(2 * w.rate) :], w.rate) for w in (inertial, proprio, tactile)]
    np.testing.assert_array_equal(raw_ipt_feature(inertial, proprio, tactile), raw_ipt_feature(*tail))


class TestErrors:
    def test_too_short(self):
        rng = np.random.default_rng(0)
        inertial, proprio, tactile = windows(rng)
        short = TimeSeriesWindow(inertial.channels[:, :90], 200.0)
        with pytest.raises(ConfigurationError):
            raw_ipt_feature(short, proprio, tactile)

    def test_non_finite(self):
        rng = np.random.default_rng(0)
        inertial, proprio, tactile = windows(rng)
        inertial.channels[1, 10] = np.nan
        with pytest.raises(ConfigurationError):
            raw_ipt_feature(inertial, proprio, tactile)

    def test_wrong_channel_count(self):
        rng = np.random.default_rng(0)
        inertial, proprio, tactile = windows(rng)
        with pytest.raises(ConfigurationError):
            raw_ipt_feature(proprio, proprio, tactile)

    def test_bad_rate(self):
        with pytest.raises(ConfigurationError):
            TimeSeriesWindow(np.zeros((1, 10)), 0.0)


def test_norm_stats_round_trip():
    rng = np.random.default_rng(5)
    raw = rng.gamma(2.0, size=(50, 288))
    raw[:, 7] = 1.0  # constant column keeps a unit scale
    stats = NormStats.fit(raw)
    z = stats.apply(raw)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-10)
    assert np.all(np.isfinite(z))
    again = NormStats.from_json(stats.to_json())
    np.testing.assert_array_equal(again.apply(raw), z)
