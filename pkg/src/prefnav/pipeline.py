"""End-to-end pipeline pieces shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from prefnav.planner import PlanConfig
from prefnav.preference import ClusterModel, Ranking, UtilityModel, kmeans_fit, train_utility
from prefnav.selfsup import Sample, SterlingModel, TrainConfig, TrainResult, train
from prefnav.signals import NormStats
from prefnav.simworld.evaluation import EvalEnv, EvalResult, PlannerBundle, cluster_ranking, evaluate
from prefnav.simworld.rollout import DatasetSample, EpisodeLog, collect, samples_from_log
from prefnav.simworld.world import TerrainMap, TerrainSpec

log = logging.getLogger(__name__)

# Weight on progress used by the evaluation planner; the stock 0.5 lets
# progress swamp the discounted terrain term (see README).
EVAL_ALPHA = 0.1


def uniform_logs(
    specs: Sequence[TerrainSpec],
    logs_per_terrain: int,
    duration: float,
    seed: int,
    dims: tuple[int, int] = (64, 64),
    cell_size: float = 0.25,
) -> Iterator[tuple[TerrainMap, EpisodeLog]]:
    """Random-walk logs on single-terrain worlds, generated lazily one at a time."""
    children = np.random.SeedSequence(seed).spawn(len(specs) * logs_per_terrain)
    for k in range(len(specs)):
        world = TerrainMap(np.full(dims, k, dtype=np.int16), cell_size, seed=int(children[0].generate_state(1)[0]) + k)
        for r in range(logs_per_terrain):
            child = children[k * logs_per_terrain + r]
            yield world, collect(world, specs, "random-walk", duration, seed=int(child.generate_state(1)[0]))


def terrain_dataset(
    specs: Sequence[TerrainSpec], logs_per_terrain: int = 4, duration: float = 60.0, seed: int = 0
) -> list[DatasetSample]:
    out: list[DatasetSample] = []
    for i, (world, ep) in enumerate(uniform_logs(specs, logs_per_terrain, duration, seed)):
        out.extend(samples_from_log(ep, world, i))
    return out


def to_training(samples: Sequence[DatasetSample], stats: NormStats | None = None) -> tuple[list[Sample], NormStats]:
    raw = np.stack([s.feature for s in samples])
    stats = stats or NormStats.fit(raw)
    feats = stats.apply(raw)
    return [Sample(s.patchset.pixel_stack(), f, s.label) for s, f in zip(samples, feats)], stats


def last_view_pixels(samples: Sequence[DatasetSample]) -> np.ndarray:
    """The closest (most recent) viewpoint of every sample."""
    return np.stack([s.patchset.patches[-1].pixels for s in samples])


def clustering_accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy under the best one-to-one matching of clusters to labels."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    p_ids, l_ids = np.unique(pred), np.unique(labels)
    table = np.zeros((len(p_ids), len(l_ids)))
    for i, p in enumerate(p_ids):
        for j, l in enumerate(l_ids):
            table[i, j] = np.sum((pred == p) & (labels == l))
    r, c = linear_sum_assignment(-table)
    return float(table[r, c].sum() / len(labels))


@dataclass
class ClusterOutcome:
    model: ClusterModel
    assignments: np.ndarray
    accuracy: float


def cluster_embeddings(embeddings: np.ndarray, labels: np.ndarray, k: int, seed: int = 0) -> ClusterOutcome:
    model, assign = kmeans_fit(embeddings, k, seed)
    return ClusterOutcome(model, assign, clustering_accuracy(assign, labels))


def train_representation(
    samples: Sequence[DatasetSample], cfg: TrainConfig
) -> tuple[TrainResult, NormStats]:
    train_samples, stats = to_training(samples)
    return train(train_samples, cfg), stats


def env_utility(
    env: EvalEnv,
    embeddings: np.ndarray,
    labels: np.ndarray,
    clusters: ClusterOutcome,
    seed: int = 0,
    epochs: int = 100,
) -> tuple[UtilityModel, Ranking]:
    """Scripted operator ranks clusters by the environment's terrain preference, then u is fit."""
    ranking = cluster_ranking(env.ranking, labels, clusters.assignments, clusters.model.k)
    return train_utility(embeddings, clusters.assignments, ranking, seed=seed, epochs=epochs), ranking


def evaluate_env(
    env: EvalEnv,
    model: SterlingModel | None,
    utility: UtilityModel | None,
    trials: int = 5,
    seed: int = 0,
    alpha: float = EVAL_ALPHA,
) -> EvalResult:
    bundle = PlannerBundle(cfg=PlanConfig(alpha=alpha), model=model, utility=utility)
    return evaluate(env.world, env.specs, bundle, env.ranking, env.start, env.goal, trials, seed)
