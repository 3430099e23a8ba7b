"""Clustering of terrain embeddings, operator rankings and the utility network."""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from prefnav import nn
from prefnav.errors import ConfigurationError
from prefnav.fileio import write_ppm

log = logging.getLogger(__name__)

K_MAX = 8
N_INIT = 10
MAX_ITER = 300
TOL = 1e-6


class ClusteringWarning(UserWarning):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    seed: int
    inertia: float = float("nan")

    def assign(self, x: np.ndarray) -> np.ndarray:
        return _sq_dists(np.asarray(x, dtype=np.float64), self.centroids).argmin(axis=1)

    def to_json(self) -> dict:
        return {"k": self.k, "seed": self.seed, "inertia": self.inertia, "centroids": self.centroids.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ClusterModel":
        return cls(k=d["k"], centroids=np.asarray(d["centroids"], dtype=np.float64), seed=d["seed"], inertia=d["inertia"])


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centres = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centres[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centres.append(x[rng.integers(n)])
            continue
        i = rng.choice(n, p=d2 / total)
        centres.append(x[i])
        d2 = np.minimum(d2, _sq_dists(x, x[i][None])[:, 0])
    return np.array(centres)


def lloyd(
    x: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_ITER, tol: float = TOL
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations; returns ``(centroids, labels, objective trace)``.

    The trace holds the within-cluster sum of squares after each assignment
    step. An emptied cluster is re-seeded at the point farthest from its
    current centre.
    """
    c = centroids.astype(np.float64).copy()
    trace = []
    for _ in range(max_iter):
        d = _sq_dists(x, c)
        labels = d.argmin(axis=1)
        trace.append(float(d[np.arange(len(x)), labels].sum()))
        new = c.copy()
        for j in range(len(c)):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = d[np.arange(len(x)), labels].argmax()
                new[j] = x[far]
        shift = np.sqrt(((new - c) ** 2).sum(axis=1)).max()
        c = new
        if shift <= tol:
            break
    d = _sq_dists(x, c)
    labels = d.argmin(axis=1)
    trace.append(float(d[np.arange(len(x)), labels].sum()))
    return c, labels, trace


def kmeans_fit(
    embeddings: np.ndarray, k: int, seed: int = 0, n_init: int = N_INIT
) -> tuple[ClusterModel, np.ndarray]:
    """Best of ``n_init`` k-means++ initialisations by within-cluster SS."""
    x = np.asarray(embeddings, dtype=np.float64)
    if k < 1:
        raise ConfigurationError("k must be positive")
    if len(x) < k:
        raise ConfigurationError(f"need at least k={k} points, got {len(x)}")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        warnings.warn(
            f"only {n_distinct} distinct points; duplicate centroids would result, using k={n_distinct}",
            ClusteringWarning,
            stacklevel=2,
        )
        k = n_distinct
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        c, labels, trace = lloyd(x, _kmeans_pp(x, k, rng))
        if best is None or trace[-1] < best[2]:
            best = (c, labels, trace[-1])
    c, labels, inertia = best
    return ClusterModel(k=k, centroids=c, seed=seed, inertia=inertia), labels


def silhouette(embeddings: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette width. Points in singleton clusters score 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(assignments)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ConfigurationError("silhouette needs at least two clusters")
    n = len(x)
    sums = np.zeros((n, len(ids)))
    for start in range(0, n, 1024):
        d = np.sqrt(_sq_dists(x[start : start + 1024], x))
        for j, cid in enumerate(ids):
            sums[start : start + 1024, j] = d[:, labels == cid].sum(axis=1)
    counts = np.array([(labels == cid).sum() for cid in ids])
    own = np.searchsorted(ids, labels)
    own_count = counts[own]
    a = np.where(own_count > 1, sums[np.arange(n), own] / np.maximum(own_count - 1, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_count > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def select_k(
    embeddings: np.ndarray, k_range: Sequence[int] = range(2, K_MAX + 1), seed: int = 0
) -> tuple[int, dict[int, float]]:
    """k with the highest mean silhouette; ties go to the smaller k."""
    x = np.asarray(embeddings, dtype=np.float64)
    ks = sorted(k for k in k_range if k <= len(x))
    if not ks:
        raise ConfigurationError("no admissible k in range")
    scores: dict[int, float] = {}
    for k in ks:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ClusteringWarning)
            model, labels = kmeans_fit(x, k, seed)
        scores[k] = silhouette(x, labels) if model.k >= 2 else 0.0
    best = max(ks, key=lambda k: (scores[k], -k))
    if best == max(k_range):
        warnings.warn(f"selected k={best} sits on the range boundary", ClusteringWarning, stacklevel=2)
    if scores[best] < 0.25:
        warnings.warn(f"weak cluster structure: best silhouette {scores[best]:.3f} at k={best}", ClusteringWarning, stacklevel=2)
    log.info("silhouette sweep %s -> k=%d", scores, best)
    return best, scores


# ---------------------------------------------------------------- ranking


@dataclass
class Ranking:
    """Groups of cluster ids, most preferred first; members of a group are tied."""

    groups: list[list[int]]

    def validate(self, k: int) -> None:
        seen: list[int] = [c for g in self.groups for c in g]
        if not self.groups or any(not g for g in self.groups):
            raise ConfigurationError("ranking groups must be non-empty")
        dup = sorted({c for c in seen if seen.count(c) > 1})
        if dup:
            raise ConfigurationError(f"duplicate cluster id(s) {dup} in ranking")
        unknown = sorted(c for c in seen if not 0 <= c < k)
        if unknown:
            raise ConfigurationError(f"unknown cluster id(s) {unknown} for k={k}")
        missing = sorted(set(range(k)) - set(seen))
        if missing:
            raise ConfigurationError(f"cluster id(s) {missing} unranked")

    def rank_of(self) -> dict[int, int]:
        return {c: r for r, g in enumerate(self.groups) for c in g}

    def to_string(self) -> str:
        return ">".join("=".join(str(c) for c in g) for g in self.groups)

    def to_json(self) -> dict:
        return {"groups": self.groups}

    @classmethod
    def from_json(cls, d: dict) -> "Ranking":
        return cls(groups=[list(map(int, g)) for g in d["groups"]])


_RANKING_RE = re.compile(r"^\s*\d+(\s*[>=]\s*\d+)*\s*$")


def parse_ranking(text: str, k: int | None = None) -> Ranking:
    """Parse ``"2>0=1>3"`` into ``[[2], [0, 1], [3]]``."""
    if not _RANKING_RE.match(text or ""):
        raise ConfigurationError(f"malformed ranking {text!r}; expected ids joined by '>' and '='")
    groups = [[int(c) for c in part.split("=")] for part in text.replace(" ", "").split(">")]
    r = Ranking(groups)
    if k is None:
        k = max(c for g in groups for c in g) + 1
    r.validate(k)
    return r


# ---------------------------------------------------------------- exemplars


def export_exemplars(
    model: ClusterModel,
    assignments: np.ndarray,
    embeddings: np.ndarray,
    patches: Sequence[np.ndarray],
    out_dir: str | Path,
    m: int = 5,
) -> dict:
    """Write the ``m`` members nearest each centroid as PPMs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = np.asarray(embeddings, dtype=np.float64)
    clusters = []
    for c in range(model.k):
        members = np.flatnonzero(assignments == c)
        d = np.sqrt(((x[members] - model.centroids[c]) ** 2).sum(axis=1))
        order = members[np.argsort(d, kind="stable")][:m]
        entries = []
        for rank, i in enumerate(order):
            name = f"cluster{c}_{rank}.ppm"
            write_ppm(out / name, np.asarray(patches[i], dtype=np.uint8))
            entries.append({"file": name, "sample_index": int(i), "distance": float(np.sqrt(((x[i] - model.centroids[c]) ** 2).sum()))})
        clusters.append({"id": c, "size": int(len(members)), "exemplars": entries})
    manifest = {"k": model.k, "clusters": clusters}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# ---------------------------------------------------------------- utility


def utility_layers(in_dim: int, hidden: int = 32) -> list[dict]:
    return [
        dict(kind="dense", in_features=in_dim, out_features=hidden),
        dict(kind="relu"),
        dict(kind="dense", in_features=hidden, out_features=1),
        dict(kind="softplus"),
    ]


class UtilityModel:
    """u: embedding -> positive utility, a 2-layer MLP with a softplus head.

    Inputs pass through a fixed per-dimension standardisation (``shift``,
    ``scale``) frozen from the training embeddings. Unit-norm embeddings can
    differ by only a few thousandths between terrains, which the MLP cannot
    amplify to a unit margin at the prescribed learning rate.
    """

    def __init__(self, in_dim: int = 64, seed: int = 0, dtype=np.float32):
        self.net = nn.build(utility_layers(in_dim), (in_dim,), seed=seed, dtype=dtype, name="utility")
        self.shift = np.zeros(in_dim, dtype=dtype)
        self.scale = np.ones(in_dim, dtype=dtype)

    def fit_standardiser(self, embeddings: np.ndarray, floor: float = 1e-6) -> None:
        x = np.asarray(embeddings, dtype=np.float64)
        self.shift = x.mean(axis=0).astype(self.shift.dtype)
        self.scale = np.maximum(x.std(axis=0), floor).astype(self.scale.dtype)

    def standardise(self, embeddings: np.ndarray) -> np.ndarray:
        return ((np.asarray(embeddings, dtype=self.shift.dtype) - self.shift) / self.scale).astype(self.shift.dtype)

    def __call__(self, embeddings: np.ndarray) -> np.ndarray:
        e = self.standardise(embeddings)
        return self.net(e.reshape(-1, e.shape[-1]))[:, 0].reshape(e.shape[:-1])

    def save(self, path: str | Path) -> None:
        arrays = {f"utility.{k}": v for k, v in self.net.named_params().items()}
        arrays["utility.input.shift"] = self.shift
        arrays["utility.input.scale"] = self.scale
        nn.save_weights(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "UtilityModel":
        arrays = nn.load_weights(path)
        in_dim = arrays["utility.0.weight"].shape[1]
        u = cls(in_dim)
        u.shift = arrays.pop("utility.input.shift", u.shift)
        u.scale = arrays.pop("utility.input.scale", u.scale)
        u.net.load_named({k[len("utility."):]: v for k, v in arrays.items()})
        return u


def terrain_cost_of(u):
    """Traversal cost ``exp(-u)``: 1 at zero utility, decaying toward 0."""
    return np.exp(-np.asarray(u, dtype=np.float64))


def ranking_loss_with_grad(ua: np.ndarray, ub: np.ndarray, relation: np.ndarray, margin: float = 1.0):
    """Mean pairwise loss. ``relation`` is +1 when a is preferred, 0 for ties.

    Preferred pairs use ``max(0, margin - (u_a - u_b))``; ties use ``|u_a - u_b|``.
    """
    diff = ua - ub
    strict = relation > 0
    hinge = np.maximum(0.0, margin - diff)
    per = np.where(strict, hinge, np.abs(diff))
    g = np.where(strict, -(hinge > 0).astype(np.float64), np.sign(diff))
    n = len(ua)
    return float(per.mean()), g / n, -g / n


def train_utility(
    embeddings: np.ndarray,
    assignments: np.ndarray,
    ranking: Ranking,
    seed: int = 0,
    epochs: int = 100,
    batch_size: int = 128,
    lr: float = 3e-4,
    margin: float = 1.0,
    pairs_per_epoch: int | None = None,
) -> UtilityModel:
    """Fit u from a ranking over clusters using random pairs of embeddings.

    Each epoch draws ``pairs_per_epoch`` (default: number of embeddings)
    random pairs; pairs within one ranking group act as ties.
    """
    x = np.asarray(embeddings, dtype=np.float32)
    labels = np.asarray(assignments)
    k = int(labels.max()) + 1 if len(labels) else 0
    ranking.validate(max(k, max(c for g in ranking.groups for c in g) + 1))
    rank = ranking.rank_of()
    if set(np.unique(labels)) - set(rank):
        raise ConfigurationError("ranking does not cover every cluster id present")
    r = np.array([rank[int(c)] for c in labels])
    ss = np.random.SeedSequence(seed)
    init_ss, pair_ss = ss.spawn(2)
    model = UtilityModel(x.shape[1], seed=int(init_ss.generate_state(1)[0]))
    model.fit_standardiser(x)
    x = model.standardise(x)
    rng = np.random.default_rng(pair_ss)
    opt = nn.Adam([model.net], lr=lr, weight_decay=0.0)
    n_pairs = pairs_per_epoch or len(x)
    for _ in range(epochs):
        a = rng.integers(len(x), size=n_pairs)
        b = rng.integers(len(x), size=n_pairs)
        swap = r[a] > r[b]
        a, b = np.where(swap, b, a), np.where(swap, a, b)
        relation = (r[a] < r[b]).astype(np.int8)
        for s in range(0, n_pairs, batch_size):
            ia, ib = a[s : s + batch_size], b[s : s + batch_size]
            out, cache = model.net.forward(np.concatenate([x[ia], x[ib]]))
            u = out[:, 0].astype(np.float64)
            m = len(ia)
            _, ga, gb = ranking_loss_with_grad(u[:m], u[m:], relation[s : s + batch_size], margin)
            grads, _ = model.net.backward(cache, np.concatenate([ga, gb])[:, None], need_input_grad=False)
            opt.step([grads])
    return model


def group_mean_utilities(model: UtilityModel, embeddings: np.ndarray, assignments: np.ndarray, ranking: Ranking) -> list[float]:
    u = model(np.asarray(embeddings, dtype=np.float32))
    labels = np.asarray(assignments)
    out = []
    for g in ranking.groups:
        mask = np.isin(labels, g)
        out.append(float(u[mask].mean()) if mask.any() else float("nan"))
    return out
