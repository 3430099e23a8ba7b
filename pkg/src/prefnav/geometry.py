"""Flat-ground camera geometry, bird's-eye-view warping and terrain patches.

Frames used throughout:

* world: x east, y north, z up.
* robot: x forward, y left, z up; origin on the ground under the robot.
* camera: optical z forward, x right, y down (pinhole convention). The camera
  sits ``cam_offset`` ahead of the robot origin at ``cam_height`` and is
  pitched down by ``cam_pitch``.

Pixel ``(u, v)`` addresses column ``u`` and row ``v``; integer coordinates are
pixel centres.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from prefnav.errors import ConfigurationError

PATCH_PX = 64
FOOTPRINT_M = 0.5
MAX_VIEWPOINTS = 20
VIEWPOINT_RADIUS_M = 2.0
LOCATION_SPACING_M = 0.25


def wrap_angle(theta):
    """Map angles to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(theta, dtype=np.float64), 2 * math.pi)


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    def to_robot(self, pts: np.ndarray) -> np.ndarray:
        """World points (..., 2) expressed in this pose's robot frame."""
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.stack(
            [self.x + c * pts[..., 0] - s * pts[..., 1], self.y + s * pts[..., 0] + c * pts[..., 1]],
            axis=-1,
        )

    def distance(self, other: "Pose2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class CameraModel:
    fx: float = 200.0
    fy: float = 200.0
    cx: float = 159.5
    cy: float = 119.5
    image_w: int = 320
    image_h: int = 240
    cam_height: float = 1.0
    cam_pitch: float = 0.7
    cam_offset: float = 0.2

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if self.cam_height <= 0:
            raise ConfigurationError("cam_height must be positive")
        if not 0.0 < self.cam_pitch < math.pi / 2:
            raise ConfigurationError("cam_pitch must lie in (0, pi/2)")

    def axes(self) -> np.ndarray:
        """Rows are the camera x (right), y (down), z (optical) axes in robot coordinates."""
        cp, sp = math.cos(self.cam_pitch), math.sin(self.cam_pitch)
        return np.array([[0.0, -1.0, 0.0], [-sp, 0.0, -cp], [cp, 0.0, -sp]])

    def centre(self) -> np.ndarray:
        return np.array([self.cam_offset, 0.0, self.cam_height])


def ground_to_pixel(cam: CameraModel, ground_pt) -> tuple[np.ndarray, np.ndarray]:
    """Project robot-frame ground points ``(..., 2)`` (z = 0) into the image.

    Returns ``(uv, in_view)``; ``uv`` is ``(..., 2)`` and is NaN where the
    point lies behind the camera. ``in_view`` also requires the pixel to fall
    inside the image.
    """
    g = np.asarray(ground_pt, dtype=np.float64)
    rel = np.concatenate([g, np.zeros(g.shape[:-1] + (1,))], axis=-1) - cam.centre()
    pc = rel @ cam.axes().T
    z = pc[..., 2]
    front = z > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, cam.fx * pc[..., 0] / z + cam.cx, np.nan)
        v = np.where(front, cam.fy * pc[..., 1] / z + cam.cy, np.nan)
    inside = (
        front
        & (u >= -0.5)
        & (u < cam.image_w - 0.5)
        & (v >= -0.5)
        & (v < cam.image_h - 0.5)
    )
    return np.stack([u, v], axis=-1), inside


def pixel_to_ground(cam: CameraModel, uv) -> tuple[np.ndarray, np.ndarray]:
    """Intersect pixel rays with the ground; returns ``(ground_xy, hits)``."""
    uv = np.asarray(uv, dtype=np.float64)
    ax = cam.axes()
    d = (
        ((uv[..., 0] - cam.cx) / cam.fx)[..., None] * ax[0]
        + ((uv[..., 1] - cam.cy) / cam.fy)[..., None] * ax[1]
        + ax[2]
    )
    hits = d[..., 2] < -1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(hits, -cam.cam_height / d[..., 2], np.nan)
    g = cam.centre()[:2] + t[..., None] * d[..., :2]
    return g, hits


@dataclass(frozen=True)
class BevSpec:
    """Metric extent of a robot-frame BEV grid.

    Row 0 is the far edge (largest forward x); column 0 is the left edge
    (largest y).
    """

    resolution: float = 0.02
    x_min: float = 0.0
    x_max: float = 6.0
    y_half: float = 3.0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigurationError("BEV resolution must be positive")

    @property
    def height(self) -> int:
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def width(self) -> int:
        return int(round(2 * self.y_half / self.resolution))

    def cell_centres(self) -> np.ndarray:
        r = np.arange(self.height)
        c = np.arange(self.width)
        xs = self.x_max - (r + 0.5) * self.resolution
        ys = self.y_half - (c + 0.5) * self.resolution
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def cell_of(self, robot_xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row/col indices for robot-frame points plus an inside-grid flag."""
        r = np.floor((self.x_max - robot_xy[..., 0]) / self.resolution).astype(np.int64)
        c = np.floor((self.y_half - robot_xy[..., 1]) / self.resolution).astype(np.int64)
        inside = (r >= 0) & (r < self.height) & (c >= 0) & (c < self.width)
        return r, c, inside


@dataclass
class BevGrid:
    spec: BevSpec
    origin_pose: Pose2
    pixels: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.pixels.shape[:2] != self.valid_mask.shape:
            raise ConfigurationError("pixels and valid_mask dimensions differ")

    @property
    def resolution(self) -> float:
        return self.spec.resolution

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@functools.lru_cache(maxsize=16)
def _bev_lookup(cam: CameraModel, spec: BevSpec, bilinear: bool):
    uv, ok = ground_to_pixel(cam, spec.cell_centres())
    if bilinear:
        u = np.clip(uv[..., 0], 0, cam.image_w - 1)
        v = np.clip(uv[..., 1], 0, cam.image_h - 1)
        return u, v, ok
    u = np.rint(np.nan_to_num(uv[..., 0])).astype(np.int64)
    v = np.rint(np.nan_to_num(uv[..., 1])).astype(np.int64)
    ok = ok & (u >= 0) & (u < cam.image_w) & (v >= 0) & (v < cam.image_h)
    return np.where(ok, v * cam.image_w + u, 0), ok


def bev_project(
    cam: CameraModel,
    image: np.ndarray,
    origin_pose: Pose2 | None = None,
    spec: BevSpec | None = None,
    bilinear: bool = False,
) -> BevGrid:
    """Inverse-warp a camera image into the robot-frame BEV grid."""
    spec = spec or BevSpec()
    origin_pose = origin_pose or Pose2(0.0, 0.0, 0.0)
    image = np.asarray(image)
    if image.shape[:2] != (cam.image_h, cam.image_w):
        raise ConfigurationError(
            f"image is {image.shape[:2]}, camera expects {(cam.image_h, cam.image_w)}"
        )
    if bilinear:
        u, v, ok = _bev_lookup(cam, spec, True)
        u0 = np.floor(u).astype(np.int64)
        v0 = np.floor(v).astype(np.int64)
        u1 = np.minimum(u0 + 1, cam.image_w - 1)
        v1 = np.minimum(v0 + 1, cam.image_h - 1)
        fu = (u - u0)[..., None]
        fv = (v - v0)[..., None]
        img = image.astype(np.float64)
        top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
        bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
        px = np.rint(top * (1 - fv) + bot * fv).astype(image.dtype)
    else:
        flat_idx, ok = _bev_lookup(cam, spec, False)
        px = image.reshape(-1, image.shape[2])[flat_idx]
    px = np.where(ok[..., None], px, 0).astype(image.dtype)
    return BevGrid(spec=spec, origin_pose=origin_pose, pixels=px, valid_mask=ok.copy())


def _footprint_offsets(n: int = PATCH_PX, size: float = FOOTPRINT_M) -> np.ndarray:
    """Offsets (n, n, 2) of patch sample points in the footprint frame.

    Patch row 0 is the forward edge, column 0 the left edge, matching the BEV.
    """
    step = size / n
    f = size / 2 - (np.arange(n) + 0.5) * step
    fx, fy = np.meshgrid(f, f, indexing="ij")
    return np.stack([fx, fy], axis=-1)


_OFFSETS = _footprint_offsets()
_CORNERS = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64) * (FOOTPRINT_M / 2)


@dataclass
class TerrainPatch:
    pixels: np.ndarray
    world_pose: Pose2
    capture_pose: Pose2
    footprint: float = FOOTPRINT_M

    def __post_init__(self):
        if self.pixels.shape != (PATCH_PX, PATCH_PX, 3):
            raise ConfigurationError(f"patch must be 64x64x3, got {self.pixels.shape}")


def _pose_array(targets) -> np.ndarray:
    if isinstance(targets, np.ndarray):
        return np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    return np.array([[t.x, t.y, t.theta] for t in targets], dtype=np.float64).reshape(-1, 3)


def _footprint_in_bev(bev: BevGrid, poses: np.ndarray, local: np.ndarray):
    """BEV row/col of footprint-frame offsets ``local`` for every target pose."""
    rel = poses[:, 2] - bev.origin_pose.theta
    c, s = np.cos(rel), np.sin(rel)
    centre = bev.origin_pose.to_robot(poses[:, :2])
    shape = (len(poses),) + (1,) * (local.ndim - 1)
    cc, ss = c.reshape(shape), s.reshape(shape)
    lx, ly = local[..., 0], local[..., 1]
    x = centre[:, 0].reshape(shape) + cc * lx - ss * ly
    y = centre[:, 1].reshape(shape) + ss * lx + cc * ly
    return bev.spec.cell_of(np.stack([x, y], axis=-1))


def patch_sample_cells(bev: BevGrid, targets):
    """Vectorised BEV lookups for many targets (Pose2 list or (k, 3) array).

    Returns ``(rows, cols, available)``: ``available`` is (k,), while rows
    and cols are (n_available, 64, 64) and cover only available targets.
    """
    poses = _pose_array(targets)
    if len(poses) == 0:
        e = np.zeros((0, PATCH_PX, PATCH_PX), dtype=np.int64)
        return e, e, np.zeros(0, dtype=bool)
    # corners first, so the full 64 x 64 sampling runs only where it is needed
    cr, cc, cin = _footprint_in_bev(bev, poses, _CORNERS)
    corner_ok = cin & bev.valid_mask[np.clip(cr, 0, bev.height - 1), np.clip(cc, 0, bev.width - 1)]
    available = corner_ok.all(axis=1)
    rows, cols, _ = _footprint_in_bev(bev, poses[available], _OFFSETS)
    return np.clip(rows, 0, bev.height - 1), np.clip(cols, 0, bev.width - 1), available


def extract_patches(bev: BevGrid, targets) -> tuple[np.ndarray, np.ndarray]:
    """Batch patch extraction: ``(pixels (k, 64, 64, 3), available (k,))``.

    Unavailable entries are zero-filled.
    """
    rows, cols, available = patch_sample_cells(bev, targets)
    px = np.zeros((len(available), PATCH_PX, PATCH_PX, bev.pixels.shape[2]), dtype=bev.pixels.dtype)
    px[available] = bev.pixels[rows, cols]
    return px, available


def extract_patch(bev: BevGrid, target: Pose2) -> TerrainPatch | None:
    """0.5 m square centred on ``target`` and aligned with its heading.

    ``None`` when any footprint corner misses the valid BEV region.
    """
    px, ok = extract_patches(bev, [target])
    if not ok[0]:
        return None
    return TerrainPatch(pixels=px[0], world_pose=target, capture_pose=bev.origin_pose)


# Robot-centred window re-rendered from memory: 2 m behind to 6 m ahead, 4 m each side.
MEMORY_VIEW = BevSpec(x_min=-2.0, x_max=6.0, y_half=4.0)


class BevMemory:
    """World-aligned ground raster fused from successive BEVs (newest wins).

    Lets the planner score states that have left the camera's view, such as
    the ground right next to the robot.
    """

    def __init__(self, lo_xy, hi_xy, resolution: float = 0.02):
        self.lo = np.asarray(lo_xy, dtype=np.float64)
        self.resolution = float(resolution)
        n = np.ceil((np.asarray(hi_xy, dtype=np.float64) - self.lo) / resolution).astype(int)
        self.pixels = np.zeros((n[1], n[0], 3), dtype=np.uint8)  # row = y index, col = x index
        self.valid = np.zeros((n[1], n[0]), dtype=bool)

    def _index(self, world_xy: np.ndarray):
        j = np.floor((world_xy[..., 0] - self.lo[0]) / self.resolution).astype(np.int64)
        i = np.floor((world_xy[..., 1] - self.lo[1]) / self.resolution).astype(np.int64)
        inside = (i >= 0) & (i < self.valid.shape[0]) & (j >= 0) & (j < self.valid.shape[1])
        return i, j, inside

    def integrate(self, bev: BevGrid) -> None:
        world = bev.origin_pose.to_world(bev.spec.cell_centres())
        i, j, inside = self._index(world)
        m = inside & bev.valid_mask
        self.pixels[i[m], j[m]] = bev.pixels[m]
        self.valid[i[m], j[m]] = True

    def local_bev(self, pose: Pose2, spec: BevSpec = MEMORY_VIEW) -> BevGrid:
        i, j, inside = self._index(pose.to_world(spec.cell_centres()))
        i = np.clip(i, 0, self.valid.shape[0] - 1)
        j = np.clip(j, 0, self.valid.shape[1] - 1)
        ok = inside & self.valid[i, j]
        px = np.where(ok[..., None], self.pixels[i, j], 0).astype(np.uint8)
        return BevGrid(spec=spec, origin_pose=pose, pixels=px, valid_mask=ok)


@dataclass
class PatchSet:
    location_id: int
    patches: list[TerrainPatch]
    terrain_label: int | None = None
    time: float = 0.0

    def __post_init__(self):
        if not 1 <= len(self.patches) <= MAX_VIEWPOINTS:
            raise ConfigurationError(f"a patch set holds 1..20 patches, got {len(self.patches)}")

    @property
    def world_pose(self) -> Pose2:
        return self.patches[0].world_pose

    def pixel_stack(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.patches])


@dataclass
class TrajectoryLog:
    """Timestamp-ordered robot poses with the camera frame captured at each."""

    times: np.ndarray
    poses: list[Pose2]
    frames: list[np.ndarray]
    camera: CameraModel = field(default_factory=CameraModel)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if not (len(self.times) == len(self.poses) == len(self.frames)):
            raise ConfigurationError("times, poses and frames must align")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("timestamps must increase strictly")


def sample_locations(
    times: np.ndarray, poses: Sequence[Pose2], spacing: float = LOCATION_SPACING_M
) -> list[tuple[float, Pose2]]:
    """Locations every ``spacing`` metres of arc length, with interpolated times.

    The heading of each location is the heading of the path segment it sits on.
    """
    if len(poses) < 2:
        return []
    xy = np.array([[p.x, p.y] for p in poses])
    seg = np.hypot(*np.diff(xy, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    out = []
    for sk in np.arange(0.0, s[-1] + 1e-12, spacing):
        i = int(np.searchsorted(s, sk, side="right") - 1)
        i = min(i, len(seg) - 1)
        while i > 0 and seg[i] == 0:
            i -= 1
        a = 0.0 if seg[i] == 0 else (sk - s[i]) / seg[i]
        p = xy[i] + a * (xy[i + 1] - xy[i])
        t = times[i] + a * (times[i + 1] - times[i])
        if seg[i] > 0:
            heading = math.atan2(xy[i + 1, 1] - xy[i, 1], xy[i + 1, 0] - xy[i, 0])
        else:
            heading = poses[i].theta
        out.append((float(t), Pose2(p[0], p[1], heading)))
    return out


def collect_patchsets(
    log: TrajectoryLog,
    spacing: float = LOCATION_SPACING_M,
    radius: float = VIEWPOINT_RADIUS_M,
    max_views: int = MAX_VIEWPOINTS,
    spec: BevSpec | None = None,
) -> list[PatchSet]:
    """Multi-viewpoint patches for each sampled location on the trajectory.

    A location collects patches from frames captured strictly before the robot
    reached it and within ``radius`` of it. When more than ``max_views`` are
    available an evenly spaced subset (in capture order) is kept. Locations
    with no available patch are dropped.
    """
    spec = spec or BevSpec()
    locations = sample_locations(log.times, log.poses, spacing)
    frame_xy = np.array([[p.x, p.y] for p in log.poses]) if log.poses else np.zeros((0, 2))
    bevs: dict[int, BevGrid] = {}
    out: list[PatchSet] = []
    for loc_id, (t, target) in enumerate(locations):
        near = np.hypot(frame_xy[:, 0] - target.x, frame_xy[:, 1] - target.y) <= radius
        cand = np.flatnonzero(near & (log.times < t - 1e-9))
        if len(cand):
            for j in [j for j in bevs if j < cand[0]]:
                del bevs[j]
        patches: list[TerrainPatch] = []
        for j in cand:
            if j not in bevs:
                bevs[j] = bev_project(log.camera, log.frames[j], log.poses[j], spec)
            p = extract_patch(bevs[j], target)
            if p is not None:
                patches.append(p)
        if not patches:
            continue
        if len(patches) > max_views:
            keep = np.unique(np.linspace(0, len(patches) - 1, max_views).round().astype(int))
            patches = [patches[i] for i in keep]
        out.append(PatchSet(location_id=loc_id, patches=patches, time=t))
    return out
