"""Receding-horizon planning over constant-curvature arcs.

Each arc is scored with ``alpha * J_geom + (1 - alpha) * J_terrain`` where the
terrain term is the discounted mean traversal cost of patches along the arc.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from prefnav.errors import ConfigurationError
from prefnav.fileio import write_pbm, write_pgm
from prefnav.geometry import BevGrid, Pose2, extract_patches
from prefnav.preference import UtilityModel, terrain_cost_of

# states (M, 3) -> per-state traversal cost, NaN where unobservable
StateCostFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PlanConfig:
    alpha: float = 0.5
    gamma: float = 0.8
    num_arcs: int = 21
    kappa_max: float = 1.0
    arc_length: float = 4.0
    n_segments: int = 9  # N; arcs carry N + 1 states

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.num_arcs < 1 or self.num_arcs % 2 == 0:
            raise ConfigurationError("num_arcs must be odd so the straight arc is included")
        if self.arc_length <= 0 or self.n_segments < 1 or self.kappa_max < 0:
            raise ConfigurationError("arc_length, n_segments and kappa_max must be positive")


@dataclass
class Arc:
    curvature: float
    arc_length: float
    states: np.ndarray  # (N + 1, 3) world x, y, theta

    @property
    def end(self) -> np.ndarray:
        return self.states[-1]


def arc_states(pose: Pose2, curvature: float, length: float, n_segments: int) -> np.ndarray:
    s = np.linspace(0.0, length, n_segments + 1)
    if curvature == 0.0:
        lx, ly = s, np.zeros_like(s)
    else:
        lx = np.sin(curvature * s) / curvature
        ly = (1.0 - np.cos(curvature * s)) / curvature
    xy = pose.to_world(np.stack([lx, ly], axis=-1))
    theta = np.asarray([float(Pose2(0, 0, pose.theta + curvature * si).theta) for si in s])
    return np.column_stack([xy, theta])


def sample_arcs(cfg: PlanConfig, pose: Pose2) -> list[Arc]:
    if cfg.num_arcs == 1:
        kappas = np.zeros(1)
    else:
        kappas = np.linspace(-cfg.kappa_max, cfg.kappa_max, cfg.num_arcs)
        kappas[cfg.num_arcs // 2] = 0.0
    return [Arc(float(k), cfg.arc_length, arc_states(pose, float(k), cfg.arc_length, cfg.n_segments)) for k in kappas]


def discounted_cost(state_costs: np.ndarray, gamma: float) -> float:
    """Discounted mean over observed states; NaN when none is observed.

    With every state observed this is ``sum(gamma**i * C_i) / (N + 1)``;
    unobserved states drop out of both the sum and the divisor.
    """
    c = np.asarray(state_costs, dtype=np.float64)
    valid = ~np.isnan(c)
    if not valid.any():
        return float("nan")
    w = gamma ** np.arange(len(c))
    return float(np.sum(w[valid] * c[valid]) / valid.sum())


def geom_cost(arc: Arc, goal: Pose2, start: Pose2 | None = None) -> float:
    """Progress cost in [0, 1]: 0 for a full arc-length of progress, 1 for full regress."""
    sx, sy = (start.x, start.y) if start is not None else arc.states[0, :2]
    d_start = math.hypot(goal.x - sx, goal.y - sy)
    d_end = math.hypot(goal.x - arc.end[0], goal.y - arc.end[1])
    val = (d_end - d_start + arc.arc_length) / (2 * arc.arc_length)
    return min(1.0, max(0.0, val))


def bev_state_costs(bev: BevGrid, encode: Callable, utility: UtilityModel) -> StateCostFn:
    """Cost function that extracts a patch per state and runs one batched inference."""

    def fn(states: np.ndarray) -> np.ndarray:
        # every arc starts at the robot pose, so encode each distinct state once
        uniq, inverse = np.unique(np.asarray(states, dtype=np.float64), axis=0, return_inverse=True)
        pixels, ok = extract_patches(bev, uniq)
        cost = np.full(len(uniq), np.nan)
        if ok.any():
            cost[ok] = terrain_cost_of(utility(encode(pixels[ok])))
        return cost[inverse.reshape(-1)]

    return fn


def terrain_cost(arc: Arc, bev: BevGrid, encode: Callable, utility: UtilityModel, cfg: PlanConfig = PlanConfig()) -> float | None:
    """Discounted terrain cost of one arc, ``None`` if no state is observable."""
    v = discounted_cost(bev_state_costs(bev, encode, utility)(arc.states), cfg.gamma)
    return None if math.isnan(v) else v


@dataclass
class ArcScore:
    index: int
    curvature: float
    geom: float
    terrain: float  # NaN when unavailable
    total: float


@dataclass
class PlanResult:
    best: Arc
    best_index: int
    table: list[ArcScore]
    geometric_only: bool = False
    arcs: list[Arc] = field(default_factory=list)


def choose(table: Sequence[ArcScore]) -> int:
    """Argmin of total; ties to the smaller |curvature|, then the lower index."""
    cands = [r for r in table if not math.isnan(r.total)]
    return min(cands, key=lambda r: (r.total, abs(r.curvature), r.index)).index


def plan_with_costs(
    pose: Pose2, goal: Pose2, state_costs: StateCostFn | None, cfg: PlanConfig = PlanConfig()
) -> PlanResult:
    """Score every arc and return the best one.

    ``state_costs`` is evaluated once on the states of all arcs. Arcs with no
    observable state are excluded while any arc is observable; if none is,
    the planner falls back to the geometric term alone and flags it.
    """
    arcs = sample_arcs(cfg, pose)
    geoms = [geom_cost(a, goal, pose) for a in arcs]
    if state_costs is None or cfg.alpha == 1.0:
        terr = [0.0] * len(arcs) if state_costs is None else [float("nan")] * len(arcs)
    else:
        all_states = np.concatenate([a.states for a in arcs])
        costs = np.asarray(state_costs(all_states), dtype=np.float64).reshape(len(arcs), -1)
        terr = [discounted_cost(c, cfg.gamma) for c in costs]
    fallback = state_costs is not None and cfg.alpha < 1.0 and all(math.isnan(t) for t in terr)
    table = []
    for i, (a, g, t) in enumerate(zip(arcs, geoms, terr)):
        if cfg.alpha == 1.0 or state_costs is None:
            total = g
        elif fallback:
            total = g
        else:
            total = cfg.alpha * g + (1 - cfg.alpha) * t if not math.isnan(t) else float("nan")
        table.append(ArcScore(i, a.curvature, g, t, total))
    best = choose(table)
    return PlanResult(best=arcs[best], best_index=best, table=table, geometric_only=fallback or state_costs is None, arcs=arcs)


def plan(
    pose: Pose2,
    goal: Pose2,
    bev: BevGrid | None,
    encode: Callable | None,
    utility: UtilityModel | None,
    cfg: PlanConfig = PlanConfig(),
) -> PlanResult:
    """Plan on a BEV with a visual encoder and utility model.

    Passing ``bev=None`` (or no models) gives the geometric-only planner.
    """
    if bev is None or encode is None or utility is None:
        return plan_with_costs(pose, goal, None, cfg)
    return plan_with_costs(pose, goal, bev_state_costs(bev, encode, utility), cfg)


def write_cost_table(path: str | Path, result: PlanResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "curvature", "geom", "terrain", "total", "chosen"])
        for r in result.table:
            w.writerow([r.index, repr(r.curvature), repr(r.geom), repr(r.terrain), repr(r.total), int(r.index == result.best_index)])


# ---------------------------------------------------------------- cost maps


@dataclass
class CostmapRender:
    values: np.ndarray  # (H, W) cost in [0, 1], NaN where invalid
    valid: np.ndarray
    stride: int

    def to_gray(self) -> np.ndarray:
        v = np.where(self.valid, self.values, 0.0)
        return np.clip(np.rint(v * 255), 0, 255).astype(np.uint8)

    def write(self, pgm_path: str | Path, pbm_path: str | Path | None = None) -> None:
        write_pgm(pgm_path, self.to_gray())
        if pbm_path is not None:
            write_pbm(pbm_path, ~self.valid)


def render_costmap(bev: BevGrid, encode: Callable, utility: UtilityModel, stride: int = 10) -> CostmapRender:
    """Terrain cost sampled every ``stride`` BEV cells (white = expensive)."""
    spec = bev.spec
    rows = np.arange(stride // 2, bev.height, stride)
    cols = np.arange(stride // 2, bev.width, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    local = np.stack(
        [spec.x_max - (rr + 0.5) * spec.resolution, spec.y_half - (cc + 0.5) * spec.resolution], axis=-1
    ).reshape(-1, 2)
    world = bev.origin_pose.to_world(local)
    theta = bev.origin_pose.theta
    targets = [Pose2(x, y, theta) for x, y in world]
    pixels, ok = extract_patches(bev, targets)
    values = np.full(len(targets), np.nan)
    if ok.any():
        values[ok] = terrain_cost_of(utility(encode(pixels[ok])))
    return CostmapRender(values=values.reshape(rr.shape), valid=ok.reshape(rr.shape), stride=stride)
