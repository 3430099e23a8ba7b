"""Closed-loop preference-alignment evaluation and the built-in test environments."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from prefnav.errors import ConfigurationError
from prefnav.geometry import BevGrid, BevMemory, CameraModel, Pose2, bev_project
from prefnav.planner import PlanConfig, PlanResult, bev_state_costs, plan_with_costs
from prefnav.preference import Ranking, UtilityModel, parse_ranking
from prefnav.selfsup import SterlingModel
from prefnav.simworld.world import TerrainMap, TerrainSpec, default_terrains, render_camera

STEP_M = 0.5  # executed per 1 Hz cycle at 0.5 m/s
GOAL_TOL_M = 0.5
BUDGET_FACTOR = 2.0
RANK_WEIGHT = 100.0  # reference path cell cost: length * (1 + RANK_WEIGHT * rank)
EXEC_RES_M = 0.05


@dataclass
class PlannerBundle:
    """What the robot plans with: a learned terrain cost, an oracle field, or nothing.

    ``model`` and ``utility`` give the learned pipeline; ``cost_field``
    (world poses (M, 3) -> cost) replaces it with a known field; with neither the
    planner is geometric-only.
    """

    cfg: PlanConfig = field(default_factory=PlanConfig)
    model: SterlingModel | None = None
    utility: UtilityModel | None = None
    cost_field: Callable[[np.ndarray], np.ndarray] | None = None
    use_memory: bool = True  # plan on fused recent views rather than the current frame alone

    @property
    def needs_camera(self) -> bool:
        return self.model is not None and self.utility is not None

    def plan(self, pose: Pose2, goal: Pose2, bev: BevGrid | None) -> PlanResult:
        if self.needs_camera and bev is not None:
            return plan_with_costs(pose, goal, bev_state_costs(bev, self.model.encode_visual, self.utility), self.cfg)
        if self.cost_field is not None:
            return plan_with_costs(pose, goal, self.cost_field, self.cfg)
        return plan_with_costs(pose, goal, None, self.cfg)


@dataclass
class ReferencePath:
    cells: list[tuple[int, int]]
    points: np.ndarray  # (n, 2) cell centres
    length: float
    worst_rank: int


def terrain_ranks(ranking: Ranking, n_specs: int) -> np.ndarray:
    """Rank per terrain id (0 = most preferred); unranked ids rank below everything."""
    r = np.full(n_specs, len(ranking.groups), dtype=np.int64)
    for k, v in ranking.rank_of().items():
        if k < n_specs:
            r[k] = v
    return r


def reference_path(world: TerrainMap, ranks: np.ndarray, start: Pose2, goal: Pose2) -> ReferencePath:
    """Cheapest 8-connected cell path with step cost ``length * (1 + W * rank)``."""
    rows, cols = world.dims
    si, sj, s_in = world.cell_of(np.array([start.x, start.y]))
    gi, gj, g_in = world.cell_of(np.array([goal.x, goal.y]))
    if not (s_in and g_in):
        raise ConfigurationError("start and goal must lie on the map")
    cell_cost = 1.0 + RANK_WEIGHT * ranks[world.ids]
    src, dst = (int(si), int(sj)), (int(gi), int(gj))
    dist = {src: 0.0}
    prev: dict = {}
    heap = [(0.0, src)]
    steps = [(di, dj, math.hypot(di, dj)) for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if (i, j) == dst:
            break
        if d > dist[(i, j)]:
            continue
        for di, dj, L in steps:
            a, b = i + di, j + dj
            if 0 <= a < rows and 0 <= b < cols:
                nd = d + L * 0.5 * (cell_cost[i, j] + cell_cost[a, b])
                if nd < dist.get((a, b), math.inf):
                    dist[(a, b)] = nd
                    prev[(a, b)] = (i, j)
                    heapq.heappush(heap, (nd, (a, b)))
    if dst not in dist:
        raise ConfigurationError("no reference path between start and goal")
    cells = [dst]
    while cells[-1] != src:
        cells.append(prev[cells[-1]])
    cells.reverse()
    pts = (np.array(cells, dtype=np.float64)[:, ::-1] + 0.5) * world.cell_size
    length = float(np.sum(np.hypot(*np.diff(pts, axis=0).T))) if len(pts) > 1 else 0.0
    length = max(length, start.distance(goal))
    worst = int(max(ranks[world.ids[i, j]] for i, j in cells))
    return ReferencePath(cells, pts, length, worst)


@dataclass
class Trial:
    seed: int
    success: bool
    reached: bool
    violated: bool
    path_length: float
    trajectory: np.ndarray  # (n, 3) poses sampled every EXEC_RES_M
    terrain: np.ndarray  # terrain id under each sample
    geometric_only_cycles: int = 0


@dataclass
class EvalResult:
    successes: int
    trials: list[Trial]
    reference: ReferencePath


def _advance(pose: Pose2, curvature: float, s: np.ndarray) -> np.ndarray:
    if curvature == 0.0:
        lx, ly = s, np.zeros_like(s)
    else:
        lx = np.sin(curvature * s) / curvature
        ly = (1.0 - np.cos(curvature * s)) / curvature
    xy = pose.to_world(np.stack([lx, ly], axis=-1))
    return np.column_stack([xy, pose.theta + curvature * s])


def run_trial(
    world: TerrainMap,
    specs: Sequence[TerrainSpec],
    bundle: PlannerBundle,
    ranks: np.ndarray,
    ref: ReferencePath,
    start: Pose2,
    goal: Pose2,
    seed: int,
    cam: CameraModel = CameraModel(),
) -> Trial:
    budget = BUDGET_FACTOR * ref.length
    pose = start
    samples = [np.array(start.as_tuple())]
    travelled = 0.0
    reached = pose.distance(goal) <= GOAL_TOL_M
    cycle = 0
    geo_cycles = 0
    s = np.arange(1, int(round(STEP_M / EXEC_RES_M)) + 1) * EXEC_RES_M
    w, h = world.extent
    memory = BevMemory((-4.0, -4.0), (w + 4.0, h + 4.0)) if bundle.use_memory else None
    while not reached and travelled < budget:
        bev = None
        if bundle.needs_camera:
            frame = render_camera(world, specs, pose, cam, noise_seed=(seed, 11, cycle))
            bev = bev_project(cam, frame, pose)
            if memory is not None:
                memory.integrate(bev)
                bev = memory.local_bev(pose)
        res = bundle.plan(pose, goal, bev)
        geo_cycles += int(res.geometric_only and bundle.needs_camera)
        path = _advance(pose, res.best.curvature, s)
        for p in path:
            samples.append(p)
            travelled += EXEC_RES_M
            if math.hypot(goal.x - p[0], goal.y - p[1]) <= GOAL_TOL_M:
                reached = True
                break
            if travelled >= budget:
                break
        pose = Pose2(*samples[-1])
        cycle += 1
    traj = np.array(samples)
    terrain = world.terrain_at(traj[:, :2])
    reached = reached and travelled <= budget + 1e-9
    violated = preference_violated(terrain, ranks, ref.worst_rank)
    return Trial(seed, reached and not violated, reached, violated, travelled, traj, terrain, geo_cycles)


def preference_violated(terrain: np.ndarray, ranks: np.ndarray, worst_allowed: int) -> bool:
    """True if any traversed terrain ranks below the worst one on the reference path."""
    terrain = np.asarray(terrain)
    # leaving the map counts as traversing unknown, least-preferred ground
    rank_seen = np.where(terrain >= 0, ranks[np.clip(terrain, 0, None)], np.iinfo(np.int64).max)
    return bool(np.any(rank_seen > worst_allowed))


def evaluate(
    world: TerrainMap,
    specs: Sequence[TerrainSpec],
    bundle: PlannerBundle,
    ranking: Ranking,
    start: Pose2,
    goal: Pose2,
    trials: int = 5,
    seed: int = 0,
    cam: CameraModel = CameraModel(),
    start_jitter: float = 0.25,
) -> EvalResult:
    """Count successful closed-loop trials.

    A trial succeeds when the robot gets within 0.5 m of the goal inside
    twice the reference path length and never crosses terrain ranked below
    the worst terrain on the reference path. Each trial's start is jittered
    and its lighting redrawn from seeds spawned off ``seed``.
    """
    ranks = terrain_ranks(ranking, len(specs))
    ref = reference_path(world, ranks, start, goal)
    out = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        tseed = int(child.generate_state(1)[0])
        dx, dy = rng.uniform(-start_jitter, start_jitter, size=2)
        dth = rng.uniform(-0.2, 0.2) if start_jitter > 0 else 0.0
        s0 = Pose2(start.x + dx, start.y + dy, start.theta + dth)
        out.append(run_trial(world, specs, bundle, ranks, ref, s0, goal, tseed, cam))
    return EvalResult(sum(t.success for t in out), out, ref)


# ---------------------------------------------------------------- environments

SIDEWALK, GRASS, BUSH, MULCH = 0, 1, 2, 3


@dataclass
class EvalEnv:
    name: str
    world: TerrainMap
    specs: list[TerrainSpec]
    start: Pose2
    goal: Pose2
    ranking: Ranking  # operator preference over terrain ids


def _rect(ids, cell, x0, x1, y0, y1, value):
    ids[int(round(y0 / cell)) : int(round(y1 / cell)), int(round(x0 / cell)) : int(round(x1 / cell))] = value


def make_env(name: str, cell: float = 0.25) -> EvalEnv:
    """Built-in environments on a 24 m x 16 m map, start at (3, 8), goal at (21, 8).

    ``detour``: a 2 m bush blob blocks the straight line, grass borders its
    far side and sidewalk is open on the near side.
    ``shortcut``: grass, preferred equally to sidewalk, covers the straight
    line; bush lies off to one side.
    ``ordering``: a grass band spans the map and must be crossed, then a 2 m
    bush blob sits on the straight line.
    """
    ids = np.full((int(round(16 / cell)), int(round(24 / cell))), SIDEWALK, dtype=np.int16)
    if name == "detour":
        _rect(ids, cell, 10, 12, 7, 9, BUSH)
        _rect(ids, cell, 8, 14, 9, 16, GRASS)
        ranking = "0>1>2"
    elif name == "shortcut":
        _rect(ids, cell, 8, 15, 4, 11, GRASS)
        _rect(ids, cell, 8, 15, 12.5, 16, BUSH)
        ranking = "0=1>2"
    elif name == "ordering":
        _rect(ids, cell, 8, 10, 0, 16, GRASS)
        _rect(ids, cell, 13, 15, 7, 9, BUSH)
        ranking = "0>1>2"
    else:
        raise ConfigurationError(f"unknown environment {name!r}")
    specs = default_terrains()[:3]
    return EvalEnv(name, TerrainMap(ids, cell, seed=101), specs, Pose2(3, 8, 0), Pose2(21, 8, 0), parse_ranking(ranking, 3))


ENVIRONMENTS = ("detour", "shortcut", "ordering")


def cluster_ranking(terrain_ranking: Ranking, cluster_labels: np.ndarray, assignments: np.ndarray, k: int) -> Ranking:
    """Scripted operator: rank each cluster by the terrain most of its members show.

    Clusters whose majority terrain the operator did not rank are tied with
    the least-preferred group: unfamiliar ground is treated as the worst
    ground the operator named, not as something even worse.
    """
    ranks = terrain_ranks(terrain_ranking, int(max(cluster_labels.max(initial=0), 0)) + 1)
    cluster_rank = []
    for c in range(k):
        members = cluster_labels[assignments == c]
        majority = int(np.bincount(members).argmax()) if len(members) else -1
        known = 0 <= majority < len(ranks) and ranks[majority] < len(terrain_ranking.groups)
        cluster_rank.append(ranks[majority] if known else len(terrain_ranking.groups) - 1)
    groups = [[c for c in range(k) if cluster_rank[c] == r] for r in sorted(set(cluster_rank))]
    return Ranking(groups)
