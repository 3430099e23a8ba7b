"""Terrain-conditioned inertial, proprioceptive and tactile signal synthesis."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from prefnav.signals import TimeSeriesWindow
from prefnav.simworld.world import STREAM_CHANNELS, STREAM_RATES, TerrainSpec

STREAMS = ("inertial", "proprio", "tactile")


def _stream_signal(spec: TerrainSpec, stream: str, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n_ch = STREAM_CHANNELS[stream]
    out = np.zeros((n_ch, len(t)))
    for c, peaks in enumerate(spec.ipt.get(stream, [[]] * n_ch)):
        for f, a in peaks:
            out[c] += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if spec.noise > 0:
        out += rng.normal(0.0, spec.noise, size=out.shape)
    return out


def synth_ipt(spec: TerrainSpec, duration: float, seed=0) -> tuple[TimeSeriesWindow, ...]:
    """Sinusoids with seeded random phases plus white noise, one window per stream."""
    rng = np.random.default_rng(seed)
    out = []
    for stream in STREAMS:
        rate = STREAM_RATES[stream]
        t = np.arange(max(1, int(round(duration * rate)))) / rate
        out.append(TimeSeriesWindow(_stream_signal(spec, stream, t, rng), rate))
    return tuple(out)


def synth_along(
    specs: Sequence[TerrainSpec], terrain_at_time, duration: float, seed=0
) -> dict[str, np.ndarray]:
    """Streams for a robot whose terrain changes over time.

    Every terrain's signal is synthesised phase-continuously over the whole
    interval; each sample then takes the signal of the terrain under the
    robot at that instant (``terrain_at_time(t) -> ids``, -1 gives silence).
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    child = ss.spawn(len(specs))
    streams = {}
    per_terrain = [np.random.default_rng(c) for c in child]
    for stream in STREAMS:
        rate = STREAM_RATES[stream]
        t = np.arange(int(np.floor(duration * rate + 1e-9)) + 1) / rate
        ids = np.asarray(terrain_at_time(t))
        x = np.zeros((STREAM_CHANNELS[stream], len(t)))
        for k, spec in enumerate(specs):
            sig = _stream_signal(spec, stream, t, per_terrain[k])
            m = ids == k
            x[:, m] = sig[:, m]
        streams[stream] = x
    return streams
