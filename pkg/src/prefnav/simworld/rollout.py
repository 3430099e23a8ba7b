"""Data-collection rollouts and the patch/IPT dataset builder."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from prefnav.errors import ConfigurationError
from prefnav.fileio import read_pnm, read_window_csv, write_ppm, write_window_csv
from prefnav.geometry import CameraModel, PatchSet, Pose2, TerrainPatch, TrajectoryLog, collect_patchsets, wrap_angle
from prefnav.signals import (
    INERTIAL_CHANNELS,
    PROPRIO_CHANNELS,
    TACTILE_CHANNELS,
    WINDOW_S,
    TimeSeriesWindow,
    raw_ipt_feature,
)
from prefnav.simworld.ipt import STREAMS, synth_along
from prefnav.simworld.world import STREAM_RATES, TerrainMap, TerrainSpec, render_camera

log = logging.getLogger(__name__)

SIM_RATE = 200.0
CAMERA_RATE = 5.0
SPEED = 0.5
MAX_OMEGA = 1.0
BOUNDARY_MARGIN = 1.0
CHANNEL_NAMES = {"inertial": INERTIAL_CHANNELS, "proprio": PROPRIO_CHANNELS, "tactile": TACTILE_CHANNELS}


@dataclass
class EpisodeLog:
    """One rollout.

    ``times``/``poses``/``frames`` are the camera captures; ``track`` holds
    the simulated pose at every ``SIM_RATE`` tick with the terrain id under
    it (ground truth, for evaluation only). Streams start at ``t = 0``.
    """

    times: np.ndarray
    poses: list[Pose2]
    frames: list[np.ndarray]
    streams: dict[str, np.ndarray]
    track_t: np.ndarray
    track: np.ndarray  # (M, 3)
    terrain_ids: np.ndarray  # (M,)
    events: list[dict] = field(default_factory=list)
    camera: CameraModel = field(default_factory=CameraModel)
    seed: int = 0

    def __post_init__(self):
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("frame timestamps must increase strictly")
        if len(self.track_t) > 1 and np.any(np.diff(self.track_t) <= 0):
            raise ConfigurationError("track timestamps must increase strictly")

    @property
    def duration(self) -> float:
        return float(self.track_t[-1]) if len(self.track_t) else 0.0

    def trajectory(self) -> TrajectoryLog:
        return TrajectoryLog(self.times, list(self.poses), list(self.frames), self.camera)

    def terrain_at_time(self, t) -> np.ndarray:
        i = np.clip(np.rint(np.asarray(t) * SIM_RATE).astype(np.int64), 0, len(self.terrain_ids) - 1)
        return self.terrain_ids[i]

    def window(self, stream: str, centre: float, length: float = WINDOW_S) -> tuple[TimeSeriesWindow, float] | None:
        """The ``length`` window centred on ``centre``, with its actual centre time."""
        rate = STREAM_RATES[stream]
        x = self.streams[stream]
        n = int(round(length * rate))
        start = int(round((centre - length / 2) * rate))
        if start < 0 or start + n > x.shape[1]:
            return None
        return TimeSeriesWindow(x[:, start : start + n].copy(), rate), (start + n / 2) / rate

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(self.frames):
            write_ppm(d / f"frame_{k:05d}.ppm", img)
        for s in STREAMS:
            write_window_csv(d / f"{s}.csv", list(CHANNEL_NAMES[s]), self.streams[s])
        track = np.column_stack([self.track_t, self.track, self.terrain_ids]).T
        write_window_csv(d / "track.csv", ["t", "x", "y", "theta", "terrain"], track)
        cam = self.camera
        index = {
            "seed": self.seed,
            "camera": {k: getattr(cam, k) for k in cam.__dataclass_fields__},
            "frames": [
                {"file": f"frame_{k:05d}.ppm", "t": float(t), "pose": list(p.as_tuple())}
                for k, (t, p) in enumerate(zip(self.times, self.poses))
            ],
            "stream_rates": {s: STREAM_RATES[s] for s in STREAMS},
            "events": self.events,
        }
        (d / "index.json").write_text(json.dumps(index, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "EpisodeLog":
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        frames = [read_pnm(d / f["file"]) for f in index["frames"]]
        streams = {s: read_window_csv(d / f"{s}.csv")[1] for s in STREAMS}
        _, track = read_window_csv(d / "track.csv")
        return cls(
            times=np.array([f["t"] for f in index["frames"]]),
            poses=[Pose2(*f["pose"]) for f in index["frames"]],
            frames=frames,
            streams=streams,
            track_t=track[0],
            track=track[1:4].T.copy(),
            terrain_ids=track[4].astype(np.int64),
            events=index["events"],
            camera=CameraModel(**index["camera"]),
            seed=index["seed"],
        )


# ---------------------------------------------------------------- rollouts


def _simulate(world: TerrainMap, policy: str, duration: float, start: Pose2, rng, waypoints, events):
    w, h = world.extent
    lo = BOUNDARY_MARGIN
    n_steps = int(round(duration * SIM_RATE))
    dt = 1.0 / SIM_RATE
    track = np.empty((n_steps + 1, 3))
    x, y, th = start.x, start.y, start.theta
    track[0] = (x, y, th)
    omega = 0.0
    wp = list(waypoints) if waypoints is not None else None
    wp_i = 0
    last = n_steps
    for k in range(1, n_steps + 1):
        if policy == "random-walk":
            # Ornstein-Uhlenbeck turn rate, 1 s correlation time
            omega += -omega * dt + 0.8 * math.sqrt(2 * dt) * rng.normal()
            omega = max(-MAX_OMEGA, min(MAX_OMEGA, omega))
        else:
            if wp is None:
                target = rng.uniform([lo + 0.5, lo + 0.5], [w - lo - 0.5, h - lo - 0.5])
                wp = [tuple(target)]
            if wp_i >= len(wp):
                last = k - 1
                break
            tx, ty = wp[wp_i]
            if math.hypot(tx - x, ty - y) < 0.3:
                wp_i += 1
                if waypoints is None:
                    wp.append(tuple(rng.uniform([lo + 0.5, lo + 0.5], [w - lo - 0.5, h - lo - 0.5])))
                if wp_i >= len(wp):
                    last = k - 1
                    break
                tx, ty = wp[wp_i]
            err = float(wrap_angle(math.atan2(ty - y, tx - x) - th))
            omega = max(-MAX_OMEGA, min(MAX_OMEGA, 2.0 * err))
        th = float(wrap_angle(th + omega * dt))
        nx, ny = x + SPEED * dt * math.cos(th), y + SPEED * dt * math.sin(th)
        reflected = False
        if not lo <= nx <= w - lo:
            th = float(wrap_angle(math.pi - th))
            reflected = True
        if not lo <= ny <= h - lo:
            th = float(wrap_angle(-th))
            reflected = True
        if reflected:
            events.append({"t": k * dt, "event": "reflect", "pose": [x, y, th]})
            nx, ny = x + SPEED * dt * math.cos(th), y + SPEED * dt * math.sin(th)
            nx, ny = min(max(nx, lo), w - lo), min(max(ny, lo), h - lo)
        x, y = nx, ny
        track[k] = (x, y, th)
    return track[: last + 1]


def collect(
    world: TerrainMap,
    specs: Sequence[TerrainSpec],
    policy: str = "random-walk",
    duration: float = 60.0,
    seed: int = 0,
    start: Pose2 | None = None,
    waypoints: Sequence[tuple[float, float]] | None = None,
    cam: CameraModel = CameraModel(),
) -> EpisodeLog:
    """Drive a unicycle at constant speed and record camera frames and IPT streams.

    ``random-walk`` steers with a random turn rate; ``waypoint`` heads for
    ``waypoints`` in order (random ones when not given) and stops after the
    last. Leaving the map's safe interior reflects the heading and is logged.
    """
    if policy not in ("random-walk", "waypoint"):
        raise ConfigurationError(f"unknown policy {policy!r}")
    if duration < 0:
        raise ConfigurationError("duration must be non-negative")
    world.validate(len(specs))
    w, h = world.extent
    if w <= 2 * BOUNDARY_MARGIN or h <= 2 * BOUNDARY_MARGIN:
        raise ConfigurationError("world is too small to drive in")
    motion_ss, start_ss, ipt_ss = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(motion_ss)
    if start is None:
        srng = np.random.default_rng(start_ss)
        sx, sy = srng.uniform([BOUNDARY_MARGIN, BOUNDARY_MARGIN], [w - BOUNDARY_MARGIN, h - BOUNDARY_MARGIN])
        start = Pose2(sx, sy, srng.uniform(-math.pi, math.pi))
    events: list[dict] = []
    track = _simulate(world, policy, duration, start, rng, waypoints, events)
    track_t = np.arange(len(track)) / SIM_RATE
    terrain_ids = world.terrain_at(track[:, :2])
    actual = track_t[-1]

    def terrain_at_time(t):
        return terrain_ids[np.clip(np.rint(t * SIM_RATE).astype(np.int64), 0, len(terrain_ids) - 1)]

    streams = synth_along(specs, terrain_at_time, actual, ipt_ss)
    step = int(round(SIM_RATE / CAMERA_RATE))
    idx = np.arange(0, len(track), step)
    poses = [Pose2(*track[i]) for i in idx]
    frames = [render_camera(world, specs, p, cam, noise_seed=(seed, 7, k)) for k, p in enumerate(poses)]
    return EpisodeLog(
        times=track_t[idx],
        poses=poses,
        frames=frames,
        streams=streams,
        track_t=track_t,
        track=track,
        terrain_ids=terrain_ids,
        events=events,
        camera=cam,
        seed=seed,
    )


# ---------------------------------------------------------------- dataset


@dataclass
class DatasetSample:
    patchset: PatchSet
    windows: tuple[TimeSeriesWindow, TimeSeriesWindow, TimeSeriesWindow]
    feature: np.ndarray  # raw (unstandardised) PSD feature
    ipt_time: float
    log_index: int = 0

    @property
    def label(self) -> int | None:
        return self.patchset.terrain_label

    @property
    def skew(self) -> float:
        return abs(self.patchset.time - self.ipt_time)


def samples_from_log(ep: EpisodeLog, world: TerrainMap | None = None, log_index: int = 0) -> Iterator[DatasetSample]:
    """Pair each sampled location's patches with the IPT window centred on its traversal time.

    Locations whose 2 s window does not fit inside the streams are dropped.
    Labels come from ``world`` when given, else from the logged track.
    """
    for ps in collect_patchsets(ep.trajectory()):
        ws = [ep.window(s, ps.time) for s in STREAMS]
        if any(w is None for w in ws):
            continue
        centre = ws[0][1]
        windows = tuple(w for w, _ in ws)
        if world is not None:
            target = ps.world_pose
            ps.terrain_label = int(world.terrain_at(np.array([target.x, target.y])))
        else:
            ps.terrain_label = int(ep.terrain_at_time(ps.time))
        yield DatasetSample(ps, windows, raw_ipt_feature(*windows), centre, log_index)


def build_dataset(logs: Iterable[EpisodeLog], world: TerrainMap | None = None) -> list[DatasetSample]:
    """Samples from every log; ``logs`` may be a lazy iterator so only one log is held at a time."""
    out: list[DatasetSample] = []
    for i, ep in enumerate(logs):
        out.extend(samples_from_log(ep, world, i))
    return out


def save_dataset(directory: str | Path, samples: Sequence[DatasetSample]) -> None:
    """Write tiled patch PPMs, window CSVs and a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"s{i:06d}"
        write_ppm(d / f"{stem}_patches.ppm", np.concatenate(list(s.patchset.pixel_stack()), axis=1))
        for name, w in zip(STREAMS, s.windows):
            write_window_csv(d / f"{stem}_{name}.csv", list(CHANNEL_NAMES[name]), w.channels)
        entries.append(
            {
                "id": stem,
                "location_id": s.patchset.location_id,
                "log": s.log_index,
                "time": s.patchset.time,
                "ipt_time": s.ipt_time,
                "label": s.label,
                "patch_poses": [list(p.world_pose.as_tuple()) for p in s.patchset.patches],
                "capture_poses": [list(p.capture_pose.as_tuple()) for p in s.patchset.patches],
            }
        )
    (d / "manifest.json").write_text(json.dumps({"samples": entries}, indent=1))


def load_dataset(directory: str | Path) -> list[DatasetSample]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    out = []
    for e in manifest["samples"]:
        tiles = read_pnm(d / f"{e['id']}_patches.ppm")
        k = len(e["patch_poses"])
        pix = tiles.reshape(tiles.shape[0], k, -1, 3).transpose(1, 0, 2, 3)
        patches = [
            TerrainPatch(np.ascontiguousarray(pix[j]), Pose2(*e["patch_poses"][j]), Pose2(*e["capture_poses"][j]))
            for j in range(k)
        ]
        ps = PatchSet(e["location_id"], patches, e["label"], e["time"])
        windows = tuple(
            TimeSeriesWindow(read_window_csv(d / f"{e['id']}_{s}.csv")[1], STREAM_RATES[s]) for s in STREAMS
        )
        out.append(DatasetSample(ps, windows, raw_ipt_feature(*windows), e["ipt_time"], e["log"]))
    return out
