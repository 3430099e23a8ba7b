"""Viewpoint-invariance + multi-modal VICReg objective, encoders and training loop."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from prefnav import nn
from prefnav.errors import ConfigurationError
from prefnav.geometry import PATCH_PX, PatchSet
from prefnav.signals import FEATURE_DIM

log = logging.getLogger(__name__)

EMBED_DIM = 64
PROJ_DIM = 128


@dataclass(frozen=True)
class VicregConfig:
    lam: float = 25.0  # invariance weight
    mu: float = 25.0  # variance weight
    nu: float = 1.0  # covariance weight
    gamma_v: float = 1.0
    eps: float = 1e-4

    def __post_init__(self):
        if min(self.lam, self.mu, self.nu, self.gamma_v, self.eps) <= 0:
            raise ConfigurationError("VICReg weights, variance target and eps must be positive")


@dataclass
class VicregTerms:
    total: float
    s: float
    v: float
    c: float


def _variance(z: np.ndarray, cfg: VicregConfig):
    n, d = z.shape
    zc = z - z.mean(axis=0)
    std = np.sqrt((zc * zc).sum(axis=0) / (n - 1) + cfg.eps)
    hinge = cfg.gamma_v - std
    active = hinge > 0
    v = float(np.sum(hinge * active) / d)
    grad = -(active / std) * zc / ((n - 1) * d)
    return v, grad


def _covariance(z: np.ndarray):
    n, d = z.shape
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / (n - 1)
    off = cov - np.diag(np.diag(cov))
    c = float(np.sum(off * off) / d)
    grad = 4.0 * zc @ off / ((n - 1) * d)
    return c, grad


def _invariance(z1: np.ndarray, z2: np.ndarray):
    n = z1.shape[0]
    diff = z1 - z2
    norm = np.sqrt(np.sum(diff * diff, axis=1))
    s = float(norm.sum() / n)
    safe = np.where(norm > 0, norm, 1.0)
    g = np.where(norm[:, None] > 0, diff / safe[:, None], 0.0) / n
    return s, g, -g


def vicreg_with_grad(z1: np.ndarray, z2: np.ndarray, cfg: VicregConfig = VicregConfig()):
    """VICReg terms and gradients with respect to both batches.

    Invariance is the mean Euclidean (not squared) distance between paired
    rows; variance and covariance use the unbiased (n - 1) estimator.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ConfigurationError(f"batches must be equal-shaped matrices, got {z1.shape} and {z2.shape}")
    if z1.shape[0] < 2:
        raise ConfigurationError("variance and covariance terms need at least 2 rows")
    s, gs1, gs2 = _invariance(z1, z2)
    v1, gv1 = _variance(z1, cfg)
    v2, gv2 = _variance(z2, cfg)
    c1, gc1 = _covariance(z1)
    c2, gc2 = _covariance(z2)
    terms = VicregTerms(
        total=cfg.lam * s + cfg.mu * (v1 + v2) + cfg.nu * (c1 + c2), s=s, v=v1 + v2, c=c1 + c2
    )
    g1 = cfg.lam * gs1 + cfg.mu * gv1 + cfg.nu * gc1
    g2 = cfg.lam * gs2 + cfg.mu * gv2 + cfg.nu * gc2
    return terms, g1, g2


def vicreg_loss(z1, z2, cfg: VicregConfig = VicregConfig()) -> tuple[float, float, float, float]:
    """``(total, s, v, c)`` where ``v`` and ``c`` already sum both branches."""
    t, _, _ = vicreg_with_grad(z1, z2, cfg)
    return t.total, t.s, t.v, t.c


class Ablation(str, enum.Enum):
    VI_ONLY = "VI_ONLY"
    MM_ONLY = "MM_ONLY"
    COMBINED = "COMBINED"


@dataclass
class SterlingTerms:
    total: float
    vi: float
    mm: float


def sterling_with_grad(psi_v1, psi_v2, psi_i, cfg: VicregConfig = VicregConfig(), ablation=Ablation.COMBINED):
    """Objective value and gradients for the three projection batches.

    ``vi`` and ``mm`` are reported even when the ablation drops them from the
    total; the returned gradients follow the total only.
    """
    ablation = Ablation(ablation)
    if not (np.shape(psi_v1) == np.shape(psi_v2) == np.shape(psi_i)):
        raise ConfigurationError("projection batches must share one shape")
    vi, g1_vi, g2_vi = vicreg_with_grad(psi_v1, psi_v2, cfg)
    mm1, g1_m, gi_1 = vicreg_with_grad(psi_v1, psi_i, cfg)
    mm2, g2_m, gi_2 = vicreg_with_grad(psi_v2, psi_i, cfg)
    mm = (mm1.total + mm2.total) / 2
    w_vi = 0.0 if ablation == Ablation.MM_ONLY else 1.0
    w_mm = 0.0 if ablation == Ablation.VI_ONLY else 1.0
    total = w_vi * vi.total + w_mm * mm
    g1 = w_vi * g1_vi + w_mm * g1_m / 2
    g2 = w_vi * g2_vi + w_mm * g2_m / 2
    gi = w_mm * (gi_1 + gi_2) / 2
    return SterlingTerms(total=total, vi=vi.total, mm=mm), g1, g2, gi


def sterling_loss(psi_v1, psi_v2, psi_i, cfg: VicregConfig = VicregConfig(), ablation=Ablation.COMBINED) -> SterlingTerms:
    return sterling_with_grad(psi_v1, psi_v2, psi_i, cfg, ablation)[0]


# ---------------------------------------------------------------- models

VISUAL_LAYERS = [
    dict(kind="conv2d", in_channels=3, out_channels=8),
    dict(kind="relu"),
    dict(kind="maxpool2"),
    dict(kind="conv2d", in_channels=8, out_channels=16),
    dict(kind="relu"),
    dict(kind="maxpool2"),
    dict(kind="conv2d", in_channels=16, out_channels=32),
    dict(kind="relu"),
    dict(kind="maxpool2"),
    dict(kind="conv2d", in_channels=32, out_channels=64),
    dict(kind="relu"),
    dict(kind="flatten"),
    dict(kind="dense", in_features=8 * 8 * 64, out_features=EMBED_DIM),
    dict(kind="l2norm"),
]


def ipt_layers(in_dim: int = FEATURE_DIM) -> list[dict]:
    return [
        dict(kind="dense", in_features=in_dim, out_features=256),
        dict(kind="relu"),
        dict(kind="dense", in_features=256, out_features=256),
        dict(kind="relu"),
        dict(kind="dense", in_features=256, out_features=256),
        dict(kind="relu"),
        dict(kind="dense", in_features=256, out_features=EMBED_DIM),
        dict(kind="l2norm"),
    ]


PROJECTOR_LAYERS = [
    dict(kind="dense", in_features=EMBED_DIM, out_features=PROJ_DIM),
    dict(kind="relu"),
    dict(kind="dense", in_features=PROJ_DIM, out_features=PROJ_DIM),
]


def patches_to_input(pixels: np.ndarray) -> np.ndarray:
    """uint8 (N, 64, 64, 3) -> float32 in [0, 1]."""
    return np.asarray(pixels, dtype=np.float32) * np.float32(1 / 255)


@dataclass
class SterlingModel:
    visual: nn.Network
    ipt: nn.Network
    projector: nn.Network

    @classmethod
    def create(cls, seed: int = 0, ipt_dim: int = FEATURE_DIM, dtype=np.float32) -> "SterlingModel":
        seeds = np.random.SeedSequence(seed).generate_state(3)
        return cls(
            visual=nn.build(VISUAL_LAYERS, (PATCH_PX, PATCH_PX, 3), int(seeds[0]), dtype, "visual"),
            ipt=nn.build(ipt_layers(ipt_dim), (ipt_dim,), int(seeds[1]), dtype, "ipt"),
            projector=nn.build(PROJECTOR_LAYERS, (EMBED_DIM,), int(seeds[2]), dtype, "projector"),
        )

    def networks(self) -> list[nn.Network]:
        return [self.visual, self.ipt, self.projector]

    def astype(self, dtype) -> "SterlingModel":
        return SterlingModel(*(n.astype(dtype) for n in self.networks()))

    def encode_visual(self, pixels: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Unit-norm visual embeddings for uint8 patches (N, 64, 64, 3) or one patch."""
        pixels = np.asarray(pixels)
        single = pixels.ndim == 3
        if single:
            pixels = pixels[None]
        if pixels.shape[1:] != (PATCH_PX, PATCH_PX, 3):
            raise ConfigurationError(f"patches must be 64x64x3, got {pixels.shape[1:]}")
        out = np.concatenate(
            [self.visual(patches_to_input(pixels[i : i + chunk])) for i in range(0, len(pixels), chunk)]
        ) if len(pixels) else np.zeros((0, EMBED_DIM), dtype=self.visual.dtype)
        return out[0] if single else out

    def encode_ipt(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features)
        single = features.ndim == 1
        if single:
            features = features[None]
        out = self.ipt(features)
        return out[0] if single else out

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.networks():
            for k, v in net.named_params().items():
                out[f"{net.name}.{k}"] = v
        return out

    def save(self, path: str | Path) -> None:
        nn.save_weights(path, self.arrays())

    @classmethod
    def load(cls, path: str | Path, ipt_dim: int = FEATURE_DIM) -> "SterlingModel":
        model = cls.create(0, ipt_dim)
        arrays = nn.load_weights(path)
        for net in model.networks():
            prefix = net.name + "."
            net.load_named({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        return model


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    ablation: Ablation = Ablation.COMBINED
    lr: float = 3e-4
    weight_decay: float = 5e-5
    checkpoint_every: int = 10
    vicreg: VicregConfig = field(default_factory=VicregConfig)

    def __post_init__(self):
        self.ablation = Ablation(self.ablation)
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")


@dataclass
class Sample:
    """One training location: its viewpoint patches and the IPT feature."""

    patches: np.ndarray  # (k, 64, 64, 3) uint8, k >= 1
    ipt: np.ndarray  # standardized feature vector
    label: int | None = None

    @classmethod
    def from_patchset(cls, ps: PatchSet, feature: np.ndarray) -> "Sample":
        return cls(patches=ps.pixel_stack(), ipt=np.asarray(feature), label=ps.terrain_label)


@dataclass
class EpochStats:
    epoch: int
    total: float
    vi: float
    mm: float


@dataclass
class TrainResult:
    model: SterlingModel
    history: list[EpochStats]
    duplicated: list[int]


def draw_pairs(samples: Sequence[Sample], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Indices of two distinct viewpoints per sample (equal for single-patch samples)."""
    i1 = np.empty(len(samples), dtype=np.int64)
    i2 = np.empty(len(samples), dtype=np.int64)
    for k, s in enumerate(samples):
        n = len(s.patches)
        if n < 2:
            i1[k] = i2[k] = 0
        else:
            a, b = rng.choice(n, size=2, replace=False)
            i1[k], i2[k] = a, b
    return i1, i2


def train_step(model: SterlingModel, opt: nn.Adam, x1, x2, xi, cfg: TrainConfig) -> SterlingTerms:
    n = len(x1)
    use_ipt = cfg.ablation != Ablation.VI_ONLY
    phi_v, cache_v = model.visual.forward(np.concatenate([patches_to_input(x1), patches_to_input(x2)]))
    stacked = [phi_v]
    if use_ipt:
        phi_i, cache_i = model.ipt.forward(xi)
        stacked.append(phi_i)
    else:
        # the multi-modal terms are still reported; the IPT branch just gets no update
        phi_i = model.ipt(xi)
        stacked.append(phi_i)
    psi, cache_p = model.projector.forward(np.concatenate(stacked))
    psi = psi.astype(np.float64)
    terms, g1, g2, gi = sterling_with_grad(psi[:n], psi[n : 2 * n], psi[2 * n :], cfg.vicreg, cfg.ablation)
    g_proj, d_phi = model.projector.backward(cache_p, np.concatenate([g1, g2, gi]))
    g_vis, _ = model.visual.backward(cache_v, d_phi[: 2 * n], need_input_grad=False)
    g_ipt = None
    if use_ipt:
        g_ipt, _ = model.ipt.backward(cache_i, d_phi[2 * n :], need_input_grad=False)
    opt.step([g_vis, g_ipt, g_proj])
    return terms


def train(
    samples: Sequence[Sample],
    cfg: TrainConfig = TrainConfig(),
    model: SterlingModel | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Jointly train both encoders and the shared projector with Adam.

    Each epoch shuffles the samples (seeded) and draws a fresh viewpoint pair
    per location. Samples with a single patch are used with ``v1 == v2`` and
    reported in ``duplicated``. The final partial batch is kept if it has at
    least two rows.
    """
    if len(samples) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed = ss.spawn(2)
    model = model or SterlingModel.create(int(init_seed.generate_state(1)[0]), ipt_dim=len(samples[0].ipt))
    rng = np.random.default_rng(shuffle_seed)
    opt = nn.Adam(model.networks(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    duplicated = [k for k, s in enumerate(samples) if len(s.patches) < 2]
    if duplicated:
        log.warning("%d samples have a single viewpoint; using v1 == v2 for them", len(duplicated))
    ipt_all = np.stack([s.ipt for s in samples]).astype(model.ipt.dtype)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        i1, i2 = draw_pairs(samples, rng)
        tot = vi = mm = 0.0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x1 = np.stack([samples[k].patches[i1[k]] for k in idx])
            x2 = np.stack([samples[k].patches[i2[k]] for k in idx])
            terms = train_step(model, opt, x1, x2, ipt_all[idx], cfg)
            tot += terms.total * len(idx)
            vi += terms.vi * len(idx)
            mm += terms.mm * len(idx)
            seen += len(idx)
        stats = EpochStats(epoch, tot / seen, vi / seen, mm / seen)
        history.append(stats)
        log.info("epoch %d loss %.4f (vi %.4f, mm %.4f)", epoch, stats.total, stats.vi, stats.mm)
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(checkpoint_dir) / f"checkpoint_{epoch + 1:03d}.strl")
    return TrainResult(model=model, history=history, duplicated=duplicated)


def write_history_csv(path: str | Path, history: Sequence[EpochStats]) -> None:
    with open(path, "w") as f:
        f.write("epoch,total,vi,mm\n")
        for h in history:
            f.write(f"{h.epoch},{h.total!r},{h.vi!r},{h.mm!r}\n")
