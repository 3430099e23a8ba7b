"""Deterministic synthetic worlds, rollouts and the evaluation protocol."""

from prefnav.simworld.evaluation import (
    ENVIRONMENTS,
    EvalEnv,
    EvalResult,
    PlannerBundle,
    cluster_ranking,
    evaluate,
    make_env,
    reference_path,
)
from prefnav.simworld.ipt import synth_ipt
from prefnav.simworld.rollout import EpisodeLog, build_dataset, collect, load_dataset, save_dataset
from prefnav.simworld.world import (
    DEFAULT_TERRAINS,
    TerrainMap,
    TerrainSpec,
    default_terrains,
    generate_world,
    load_world,
    render_camera,
    save_world,
)

__all__ = [
    "DEFAULT_TERRAINS",
    "ENVIRONMENTS",
    "EpisodeLog",
    "EvalEnv",
    "EvalResult",
    "PlannerBundle",
    "TerrainMap",
    "TerrainSpec",
    "build_dataset",
    "cluster_ranking",
    "collect",
    "default_terrains",
    "evaluate",
    "generate_world",
    "load_dataset",
    "load_world",
    "make_env",
    "reference_path",
    "render_camera",
    "save_dataset",
    "save_world",
    "synth_ipt",
]
