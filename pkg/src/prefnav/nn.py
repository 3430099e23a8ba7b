"""A small numpy network library: layers with explicit caches, Adam, gradient checks.

Images are NHWC. Dense weights are stored ``(out, in)`` and conv weights
``(out, in, 3, 3)``. ``Network.forward`` returns the output together with a
cache object; ``Network.backward`` consumes it. Networks hold no per-call
state, so forward passes are reentrant.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from prefnav.errors import ConfigurationError, UsageError

WEIGHTS_MAGIC = b"STRL"
WEIGHTS_VERSION = 1


class NonFiniteGradientError(ArithmeticError):
    pass


# ---------------------------------------------------------------- layers


class Layer:
    kind = ""

    def init(self, rng: np.random.Generator, in_shape: tuple, dtype) -> dict:
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, p: dict, x: np.ndarray):
        raise NotImplementedError

    def backward(self, p: dict, cache, dy: np.ndarray, need_dx: bool = True):
        """Return ``(dx, grads)``; ``dx`` may be None when ``need_dx`` is False."""
        raise NotImplementedError


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class Dense(Layer):
    in_features: int
    out_features: int
    kind = "dense"

    def init(self, rng, in_shape, dtype):
        if in_shape != (self.in_features,):
            raise ConfigurationError(f"dense expects ({self.in_features},), got {in_shape}")
        return {
            "weight": _kaiming_uniform(rng, (self.out_features, self.in_features), self.in_features, dtype),
            "bias": np.zeros(self.out_features, dtype=dtype),
        }

    def out_shape(self, in_shape):
        return (self.out_features,)

    def forward(self, p, x):
        return x @ p["weight"].T + p["bias"], x

    def backward(self, p, x, dy, need_dx=True):
        grads = {"weight": dy.T @ x, "bias": dy.sum(axis=0)}
        return dy @ p["weight"], grads


@dataclass
class Conv2d(Layer):
    """3x3, stride 1, zero 'same' padding."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    kind = "conv2d"

    def __post_init__(self):
        if self.kernel != 3 or self.stride != 1:
            raise ConfigurationError("only kernel 3, stride 1 convolutions are supported")

    def init(self, rng, in_shape, dtype):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ConfigurationError(f"conv2d expects (H, W, {self.in_channels}), got {in_shape}")
        fan_in = self.in_channels * 9
        return {
            "weight": _kaiming_uniform(rng, (self.out_channels, self.in_channels, 3, 3), fan_in, dtype),
            "bias": np.zeros(self.out_channels, dtype=dtype),
        }

    def out_shape(self, in_shape):
        return (in_shape[0], in_shape[1], self.out_channels)

    def forward(self, p, x):
        cols = self._im2col(x)
        y = cols @ self._wmat(p["weight"]).T + p["bias"]
        return y.reshape(x.shape[:3] + (self.out_channels,)), (cols, x.shape)

    @staticmethod
    def _im2col(x):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # (kh, kw, c) column order keeps the copy's inner runs contiguous
        return (
            sliding_window_view(xp, (3, 3), axis=(1, 2))
            .transpose(0, 1, 2, 4, 5, 3)
            .reshape(n * h * w, 9 * c)
        )

    @staticmethod
    def _wmat(weight):
        return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)

    def backward(self, p, cache, dy, need_dx=True):
        cols, (n, h, w, c) = cache
        dy2 = dy.reshape(-1, self.out_channels)
        gw = (dy2.T @ cols).reshape(self.out_channels, 3, 3, c).transpose(0, 3, 1, 2)
        grads = {"weight": np.ascontiguousarray(gw), "bias": dy2.sum(axis=0)}
        if not need_dx:
            return None, grads
        # input gradient = same-padded correlation of dy with the flipped,
        # channel-transposed kernel
        flipped = p["weight"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = self._im2col(dy) @ self._wmat(flipped).T
        return dx.reshape(n, h, w, c), grads


@dataclass
class ReLU(Layer):
    kind = "relu"

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy, need_dx=True):
        return dy * mask, {}


@dataclass
class Softplus(Layer):
    kind = "softplus"

    def forward(self, p, x):
        return np.logaddexp(0, x), x

    def backward(self, p, x, dy, need_dx=True):
        return dy / (1 + np.exp(-x)), {}


@dataclass
class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""

    kind = "maxpool2"

    def out_shape(self, in_shape):
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])

    def forward(self, p, x):
        h2, w2 = x.shape[1] // 2, x.shape[2] // 2
        q = [x[:, a : 2 * h2 : 2, b : 2 * w2 : 2] for a in (0, 1) for b in (0, 1)]
        y = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        return y, (x, y)

    def backward(self, p, cache, dy, need_dx=True):
        x, y = cache
        h2, w2 = y.shape[1], y.shape[2]
        dx = np.zeros_like(x, dtype=dy.dtype)
        taken = np.zeros(y.shape, dtype=bool)
        for a in (0, 1):
            for b in (0, 1):
                hit = (x[:, a : 2 * h2 : 2, b : 2 * w2 : 2] == y) & ~taken
                dx[:, a : 2 * h2 : 2, b : 2 * w2 : 2] = dy * hit
                taken |= hit
        return dx, {}


@dataclass
class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, dy, need_dx=True):
        return dy.reshape(shape), {}


@dataclass
class L2Norm(Layer):
    """Row-wise projection onto the unit sphere, ``x / sqrt(|x|^2 + eps^2)``."""

    eps: float = 1e-12
    kind = "l2norm"

    def forward(self, p, x):
        s = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + self.eps**2)
        y = x / s
        return y, (y, s)

    def backward(self, p, cache, dy, need_dx=True):
        y, s = cache
        return (dy - y * np.sum(dy * y, axis=-1, keepdims=True)) / s, {}


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x)
    return x / np.sqrt(np.sum(x * x, axis=axis, keepdims=True) + eps**2)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, Softplus, MaxPool2, Flatten, L2Norm)}


# ---------------------------------------------------------------- network


@dataclass
class Cache:
    network_id: int
    version: int
    entries: list


class Network:
    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: tuple,
        seed: int = 0,
        dtype=np.float32,
        name: str = "net",
    ):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.name = name
        self.version = 0
        rng = np.random.default_rng(seed)
        self.params: list[dict[str, np.ndarray]] = []
        shape = self.input_shape
        for layer in self.layers:
            self.params.append(layer.init(rng, shape, self.dtype))
            shape = layer.out_shape(shape)
        self.output_shape = shape

    # parameters are exposed as a flat name -> array mapping ("3.weight")
    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, p in enumerate(self.params) for k, v in p.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.named_params().values())

    def touch(self) -> None:
        """Mark parameters as modified, invalidating outstanding caches."""
        self.version += 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"{self.name}: input shape {x.shape[1:]} does not match {self.input_shape}"
            )
        x = x.astype(self.dtype, copy=False)
        entries = []
        for layer, p in zip(self.layers, self.params):
            x, c = layer.forward(p, x)
            entries.append(c)
        return x, Cache(id(self), self.version, entries)

    def __call__(self, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
        x = np.asarray(x)
        if len(x) <= chunk:
            return self.forward(x)[0]
        return np.concatenate([self.forward(x[i : i + chunk])[0] for i in range(0, len(x), chunk)])

    def backward(
        self, cache: Cache, dy: np.ndarray, need_input_grad: bool = True
    ) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
        if cache.network_id != id(self) or cache.version != self.version:
            raise UsageError(f"{self.name}: cache is stale or belongs to another network")
        dy = np.asarray(dy, dtype=self.dtype)
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            need = need_input_grad or i > 0
            dy, g = self.layers[i].backward(self.params[i], cache.entries[i], dy, need_dx=need)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return grads, dy

    def astype(self, dtype) -> "Network":
        twin = Network.__new__(Network)
        twin.layers = self.layers
        twin.input_shape = self.input_shape
        twin.output_shape = self.output_shape
        twin.dtype = np.dtype(dtype)
        twin.name = self.name
        twin.version = 0
        twin.params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return twin

    def load_named(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_params()
        if set(own) != set(arrays):
            raise ConfigurationError(f"{self.name}: parameter names differ from file")
        for name, arr in arrays.items():
            if own[name].shape != arr.shape:
                raise ConfigurationError(f"{self.name}: shape mismatch for {name}")
            i, k = name.split(".", 1)
            self.params[int(i)][k] = arr.astype(self.dtype)
        self.touch()


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """In-place AdamW update of ``params`` (decay first, then the Adam step).

    Parameters absent from ``grads`` are left untouched. Raises
    ``NonFiniteGradientError`` without modifying anything if a gradient is
    not finite.
    """
    for k, g in grads.items():
        if k not in params:
            raise ConfigurationError(f"gradient for unknown parameter {k}")
        if g.shape != params[k].shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k}; step rejected")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for k, g in grads.items():
        w = params[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        m, v = state.m[k], state.v[k]
        if state.weight_decay:
            w *= w.dtype.type(1 - state.lr * state.weight_decay)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        w -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)
    return params


class Adam:
    """Adam over the parameters of several networks."""

    def __init__(self, networks: Iterable[Network], **hyper):
        self.networks = list(networks)
        self.state = AdamState(**hyper)

    def step(self, grads_per_network: Sequence[dict[str, np.ndarray] | None]) -> None:
        params, grads = {}, {}
        for net, g in zip(self.networks, grads_per_network):
            if g is None:
                continue
            own = net.named_params()
            for k, v in g.items():
                params[f"{net.name}/{k}"] = own[k]
                grads[f"{net.name}/{k}"] = v
        adam_step(self.state, params, grads)
        for net, g in zip(self.networks, grads_per_network):
            if g is not None:
                net.touch()


# ---------------------------------------------------------------- weights file


def save_weights(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays in the STRL container (f32 little-endian payloads)."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ConfigurationError(f"{path}: not an STRL weights file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHTS_VERSION:
        raise ConfigurationError(f"{path}: unsupported weights version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, "<f4", count, pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return out


# ---------------------------------------------------------------- gradient checks


def rel_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    return np.where(denom == 0, 0.0, np.abs(a - b) / np.where(denom == 0, 1.0, denom))


def finite_difference_check(
    loss: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    n_samples: int = 50,
    h: float = 1e-5,
    seed: int = 0,
) -> np.ndarray:
    """Central differences on ``n_samples`` random scalar parameters.

    ``loss`` must read the arrays in ``params`` (which are perturbed in
    place and restored). Returns the relative errors.
    """
    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    flat_pick = rng.choice(sizes.sum(), size=min(n_samples, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    errs = []
    for fp in flat_pick:
        i = int(np.searchsorted(bounds, fp, side="right"))
        k = names[i]
        j = fp - (bounds[i] - sizes[i])
        arr = params[k].reshape(-1)
        old = arr[j]
        arr[j] = old + h
        lp = loss()
        arr[j] = old - h
        lm = loss()
        arr[j] = old
        num = (lp - lm) / (2 * h)
        errs.append(float(rel_error(analytic[k].reshape(-1)[j], num)))
    return np.array(errs)


def build(specs: Sequence[dict], input_shape: tuple, seed: int = 0, dtype=np.float32, name: str = "net") -> Network:
    """Build a network from ``[{"kind": "conv2d", "in_channels": 3, ...}, ...]``."""
    layers = []
    for s in specs:
        s = dict(s)
        kind = s.pop("kind")
        if kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
        layers.append(LAYER_KINDS[kind](**s))
    return Network(layers, input_shape, seed=seed, dtype=dtype, name=name)
