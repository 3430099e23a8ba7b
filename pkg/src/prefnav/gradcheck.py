"""Finite-difference checks of every layer and of the full training objective (float64)."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from prefnav import nn
from prefnav.selfsup import Ablation, SterlingModel, VicregConfig, patches_to_input, sterling_with_grad

LAYER_TOL = 1e-6
LOSS_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


# one small network per layer kind; inputs are drawn away from ReLU kinks and max-pool ties
LAYER_CASES = {
    "dense": ([dict(kind="dense", in_features=7, out_features=5)], (7,)),
    "conv2d": ([dict(kind="conv2d", in_channels=3, out_channels=4)], (6, 6, 3)),
    "relu": ([dict(kind="relu")], (9,)),
    "softplus": ([dict(kind="softplus")], (9,)),
    "maxpool2": ([dict(kind="maxpool2")], (6, 6, 2)),
    "flatten": ([dict(kind="flatten")], (4, 4, 2)),
    "l2norm": ([dict(kind="l2norm")], (8,)),
}


def _layer_input(kind: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    x = rng.normal(size=(4,) + shape)
    if kind == "relu":
        x = np.sign(x) * (0.1 + np.abs(x))
    if kind == "maxpool2":
        x = rng.permutation(np.linspace(-2, 2, x.size)).reshape(x.shape)
    return x


def check_layer(kind: str, seed: int = 0, n_samples: int = 50) -> CheckResult:
    specs, shape = LAYER_CASES[kind]
    rng = np.random.default_rng(seed)
    net = nn.build(specs, shape, seed=seed, dtype=np.float64, name=kind)
    x = _layer_input(kind, shape, rng)
    y, _ = net.forward(x)
    proj = rng.normal(size=y.shape)
    params = dict(net.named_params())
    params["input"] = x

    def loss() -> float:
        out, _ = net.forward(params["input"])
        return float(np.sum(proj * out))

    _, cache = net.forward(x)
    grads, dx = net.backward(cache, proj)
    analytic = dict(grads)
    analytic["input"] = dx
    errs = nn.finite_difference_check(loss, params, analytic, n_samples=n_samples, seed=seed)
    return CheckResult(f"layer:{kind}", float(errs.max()), LAYER_TOL, len(errs))


def check_objective(ablation: Ablation = Ablation.COMBINED, seed: int = 0, batch: int = 8, n_samples: int = 60) -> CheckResult:
    """Gradient of the full objective with respect to parameters of all three networks."""
    rng = np.random.default_rng(seed)
    model = SterlingModel.create(seed, dtype=np.float64)
    x1 = patches_to_input(rng.integers(0, 256, size=(batch, 64, 64, 3), dtype=np.uint8)).astype(np.float64)
    x2 = patches_to_input(rng.integers(0, 256, size=(batch, 64, 64, 3), dtype=np.uint8)).astype(np.float64)
    xi = rng.normal(size=(batch, model.ipt.input_shape[0]))
    cfg = VicregConfig()
    params = {}
    for net in model.networks():
        for k, v in net.named_params().items():
            params[f"{net.name}.{k}"] = v

    def forward():
        pv, cv = model.visual.forward(np.concatenate([x1, x2]))
        pi, ci = model.ipt.forward(xi)
        psi, cp = model.projector.forward(np.concatenate([pv, pi]))
        return psi, cv, ci, cp

    def loss() -> float:
        psi = forward()[0]
        terms, *_ = sterling_with_grad(psi[:batch], psi[batch : 2 * batch], psi[2 * batch :], cfg, ablation)
        return terms.total

    psi, cv, ci, cp = forward()
    _, g1, g2, gi = sterling_with_grad(psi[:batch], psi[batch : 2 * batch], psi[2 * batch :], cfg, ablation)
    gp, dphi = model.projector.backward(cp, np.concatenate([g1, g2, gi]))
    gv, _ = model.visual.backward(cv, dphi[: 2 * batch], need_input_grad=False)
    gipt, _ = model.ipt.backward(ci, dphi[2 * batch :], need_input_grad=False)
    analytic = {}
    for net, g in ((model.visual, gv), (model.ipt, gipt), (model.projector, gp)):
        for k, v in g.items():
            analytic[f"{net.name}.{k}"] = v
    # sample per network so the small projector and IPT encoder are not drowned out by the CNN
    errs = []
    for prefix in ("visual.", "ipt.", "projector."):
        sub = {k: v for k, v in params.items() if k.startswith(prefix)}
        sub_g = {k: analytic[k] for k in sub}
        if ablation == Ablation.VI_ONLY and prefix == "ipt.":
            assert all(np.all(g == 0) for g in sub_g.values())
            continue
        errs.append(nn.finite_difference_check(loss, sub, sub_g, n_samples=n_samples // 3, seed=seed))
    errs = np.concatenate(errs)
    return CheckResult(f"objective:{ablation.value}", float(errs.max()), LOSS_TOL, len(errs))


def run_all(seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = [check_layer(k, seed) for k in LAYER_CASES]
    results += [check_objective(a, seed) for a in Ablation]
    return results, time.perf_counter() - t0
