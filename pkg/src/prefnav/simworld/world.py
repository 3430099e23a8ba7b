"""Terrain-typed ground worlds and their camera renderings."""

from __future__ import annotations

import functools
import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from prefnav.errors import ConfigurationError
from prefnav.geometry import CameraModel, Pose2, pixel_to_ground
from prefnav.signals import INERTIAL_RATE, PROPRIO_RATE, TACTILE_RATE

STREAM_RATES = {"inertial": INERTIAL_RATE, "proprio": PROPRIO_RATE, "tactile": TACTILE_RATE}
STREAM_CHANNELS = {"inertial": 3, "proprio": 4, "tactile": 2}


@dataclass
class TerrainSpec:
    """Appearance and vibration signature of one terrain type.

    ``ipt`` maps each stream name to one list per channel of
    ``(peak_hz, amplitude)`` pairs; ``noise`` is the white-noise standard
    deviation added to every channel.
    """

    name: str
    base_rgb: tuple[int, int, int]
    texture_amp: float = 0.0
    texel_size: float = 0.05
    lighting_amp: float = 0.0
    ipt: dict[str, list[list[tuple[float, float]]]] = field(default_factory=dict)
    noise: float = 0.0

    def __post_init__(self):
        self.base_rgb = tuple(int(c) for c in self.base_rgb)
        if self.texel_size <= 0:
            raise ConfigurationError("texel_size must be positive")
        if self.texture_amp < 0 or self.lighting_amp < 0 or self.noise < 0:
            raise ConfigurationError("amplitudes must be non-negative")
        for stream, chans in self.ipt.items():
            if stream not in STREAM_RATES:
                raise ConfigurationError(f"unknown stream {stream!r}")
            if len(chans) != STREAM_CHANNELS[stream]:
                raise ConfigurationError(f"{stream} needs {STREAM_CHANNELS[stream]} channel signatures")
            nyq = STREAM_RATES[stream] / 2
            for peaks in chans:
                for f, a in peaks:
                    if not 0 < f < nyq:
                        raise ConfigurationError(f"{self.name}: {f} Hz is not below the {stream} Nyquist {nyq} Hz")
                    if a < 0:
                        raise ConfigurationError("peak amplitudes must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["base_rgb"] = list(self.base_rgb)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TerrainSpec":
        d = dict(d)
        d["ipt"] = {k: [[tuple(p) for p in ch] for ch in v] for k, v in d.get("ipt", {}).items()}
        return cls(**d)


def _sig(*chans):
    return [list(c) for c in chans]


# Grass and bush share a hue and overlap in brightness once lighting varies;
# their texture and, above all, their vibration signatures differ.
DEFAULT_TERRAINS: tuple[TerrainSpec, ...] = (
    TerrainSpec(
        "sidewalk", (168, 166, 160), texture_amp=0.06, texel_size=0.12, lighting_amp=0.2,
        ipt={
            "inertial": _sig([(2.0, 0.05)], [(3.0, 0.05)], [(4.0, 0.10)]),
            "proprio": _sig([(1.0, 0.30)], [(1.0, 0.25)], [(1.0, 0.40)], [(1.0, 0.35)]),
            "tactile": _sig([(1.0, 0.50)], [(1.0, 0.05)]),
        },
        noise=0.02,
    ),
    TerrainSpec(
        "grass", (84, 138, 60), texture_amp=0.22, texel_size=0.03, lighting_amp=0.2,
        ipt={
            "inertial": _sig([(9.0, 0.30)], [(12.0, 0.25)], [(16.0, 0.40)]),
            "proprio": _sig([(1.5, 0.40), (4.5, 0.10)], [(1.5, 0.35)], [(1.5, 0.50)], [(3.0, 0.30)]),
            "tactile": _sig([(1.5, 0.50)], [(1.5, 0.20)]),
        },
        noise=0.05,
    ),
    TerrainSpec(
        "bush", (62, 112, 48), texture_amp=0.40, texel_size=0.07, lighting_amp=0.2,
        ipt={
            "inertial": _sig([(27.0, 0.80), (41.0, 0.30)], [(33.0, 0.60)], [(45.0, 0.90)]),
            "proprio": _sig([(2.5, 0.70), (6.0, 0.30)], [(2.5, 0.60)], [(5.0, 0.50)], [(7.5, 0.40)]),
            "tactile": _sig([(2.5, 0.50)], [(5.0, 0.40)]),
        },
        noise=0.15,
    ),
    TerrainSpec(
        "mulch", (118, 82, 52), texture_amp=0.30, texel_size=0.04, lighting_amp=0.2,
        ipt={
            "inertial": _sig([(14.0, 0.50)], [(19.0, 0.40)], [(31.0, 0.50)]),
            "proprio": _sig([(1.2, 0.50)], [(2.4, 0.30)], [(1.2, 0.45)], [(3.6, 0.25)]),
            "tactile": _sig([(1.2, 0.50)], [(1.2, 0.35)]),
        },
        noise=0.08,
    ),
)


def default_terrains() -> list[TerrainSpec]:
    return [TerrainSpec.from_json(t.to_json()) for t in DEFAULT_TERRAINS]


@dataclass
class TerrainMap:
    """Grid of terrain ids; cell ``(i, j)`` covers ``x in [j, j+1) * cell``, ``y in [i, i+1) * cell``."""

    ids: np.ndarray
    cell_size: float
    seed: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int16)
        if self.cell_size <= 0:
            raise ConfigurationError("cell_size must be positive")

    @property
    def dims(self) -> tuple[int, int]:
        return self.ids.shape

    @property
    def extent(self) -> tuple[float, float]:
        """World width (x) and height (y) in metres."""
        return self.ids.shape[1] * self.cell_size, self.ids.shape[0] * self.cell_size

    def cell_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64)
        j = np.floor(xy[..., 0] / self.cell_size).astype(np.int64)
        i = np.floor(xy[..., 1] / self.cell_size).astype(np.int64)
        inside = (i >= 0) & (i < self.ids.shape[0]) & (j >= 0) & (j < self.ids.shape[1])
        return i, j, inside

    def terrain_at(self, xy) -> np.ndarray:
        """Terrain id at world points; -1 outside the map."""
        i, j, inside = self.cell_of(xy)
        out = self.ids[np.clip(i, 0, self.ids.shape[0] - 1), np.clip(j, 0, self.ids.shape[1] - 1)].astype(np.int64)
        return np.where(inside, out, -1)

    def validate(self, n_specs: int) -> None:
        if self.ids.min() < 0 or self.ids.max() >= n_specs:
            raise ConfigurationError("terrain map references an unknown terrain id")


def generate_world(
    specs: Sequence[TerrainSpec],
    dims: tuple[int, int],
    cell_size: float = 0.25,
    seed: int = 0,
    regions_per_terrain: int = 3,
) -> TerrainMap:
    """Seeded region growing from random seed cells.

    Every terrain owns ``regions_per_terrain`` seeds; regions grow by
    shortest paths over random positive cell weights, which yields
    contiguous, irregular blobs.
    """
    rows, cols = dims
    n_specs = len(specs)
    if n_specs == 0:
        raise ConfigurationError("at least one terrain spec is needed")
    if n_specs == 1:
        return TerrainMap(np.zeros((rows, cols), dtype=np.int16), cell_size, seed)
    n_regions = n_specs * regions_per_terrain
    if rows * cols < n_regions:
        raise ConfigurationError(f"{rows}x{cols} cells cannot hold {n_regions} regions")
    rng = np.random.default_rng(seed)
    weight = rng.uniform(0.2, 1.0, size=(rows, cols))
    seeds = rng.choice(rows * cols, size=n_regions, replace=False)
    ids = np.full((rows, cols), -1, dtype=np.int16)
    dist = np.full((rows, cols), np.inf)
    heap = []
    for r, s in enumerate(seeds):
        i, j = divmod(int(s), cols)
        dist[i, j] = 0.0
        heapq.heappush(heap, (0.0, r, i, j))
    while heap:
        d, r, i, j = heapq.heappop(heap)
        if ids[i, j] >= 0:
            continue
        ids[i, j] = r % n_specs
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < rows and 0 <= b < cols and ids[a, b] < 0:
                nd = d + weight[a, b]
                if nd < dist[a, b]:
                    dist[a, b] = nd
                    heapq.heappush(heap, (nd, r, a, b))
    return TerrainMap(ids, cell_size, seed)


def save_world(path: str | Path, world: TerrainMap, specs: Sequence[TerrainSpec]) -> None:
    flat = world.ids.reshape(-1)
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    doc = {
        "cell_size": world.cell_size,
        "dims": list(world.dims),
        "seed": world.seed,
        "specs": [s.to_json() for s in specs],
        "grid_rle": [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_world(path: str | Path) -> tuple[TerrainMap, list[TerrainSpec]]:
    doc = json.loads(Path(path).read_text())
    flat = np.concatenate([np.full(n, v, dtype=np.int16) for v, n in doc["grid_rle"]])
    world = TerrainMap(flat.reshape(doc["dims"]), doc["cell_size"], doc["seed"])
    specs = [TerrainSpec.from_json(s) for s in doc["specs"]]
    world.validate(len(specs))
    return world, specs


# ---------------------------------------------------------------- rendering


def _hash_uniform(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic per-texel values in [-1, 1) (splitmix64 finaliser)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (
            iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ) ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def ground_colour(
    world: TerrainMap, specs: Sequence[TerrainSpec], xy: np.ndarray, gain_u: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Float RGB of the textured ground at world points plus the terrain ids.

    ``gain_u`` in [-1, 1] scales each terrain's lighting amplitude. Points
    off the map are black with id -1.
    """
    tid = world.terrain_at(xy)
    out = np.zeros(xy.shape[:-1] + (3,))
    for k, spec in enumerate(specs):
        m = tid == k
        if not m.any():
            continue
        p = xy[m]
        tex = 1.0
        if spec.texture_amp > 0:
            ix = np.floor(p[:, 0] / spec.texel_size).astype(np.int64)
            iy = np.floor(p[:, 1] / spec.texel_size).astype(np.int64)
            tex = 1.0 + spec.texture_amp * _hash_uniform(ix, iy, world.seed * 1000003 + k)
        gain = 1.0 + spec.lighting_amp * gain_u
        out[m] = np.asarray(spec.base_rgb, dtype=np.float64) * (np.asarray(tex)[..., None] * gain)
    return out, tid


@functools.lru_cache(maxsize=8)
def _pixel_ground(cam: CameraModel):
    v, u = np.mgrid[0 : cam.image_h, 0 : cam.image_w]
    g, hits = pixel_to_ground(cam, np.stack([u, v], axis=-1).astype(np.float64))
    return g, hits


def frame_gain(noise_seed) -> float:
    """Per-frame lighting draw in [-1, 1], fixed by ``noise_seed``."""
    rng = np.random.default_rng(noise_seed)
    return float(rng.uniform(-1.0, 1.0))


def render_camera(
    world: TerrainMap,
    specs: Sequence[TerrainSpec],
    pose: Pose2,
    cam: CameraModel = CameraModel(),
    noise_seed=0,
) -> np.ndarray:
    """Perspective render of the textured ground plane (uint8 RGB).

    Rays that miss the ground or leave the map render black.
    """
    g, hits = _pixel_ground(cam)
    world_xy = pose.to_world(np.where(hits[..., None], g, 0.0))
    rgb, _ = ground_colour(world, specs, world_xy, frame_gain(noise_seed))
    rgb[~hits] = 0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def texture_reference(world: TerrainMap, specs: Sequence[TerrainSpec], xy: np.ndarray, noise_seed=0) -> np.ndarray:
    """Ground-truth colour (uint8) at world points, as the renderer would shade it."""
    rgb, _ = ground_colour(world, specs, np.asarray(xy, dtype=np.float64), frame_gain(noise_seed))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
