"""Parameterized layers and the normalization schemes used by the GAN models."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Module",
    "Dense",
    "Conv2d",
    "Deconv2d",
    "BatchNormState",
    "weight_normalize",
    "instance_norm",
    "instance_norm_vec",
    "batch_norm",
    "init_params",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "LEAKY_SLOPE",
    "INIT_STD",
]

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
WN_EPS = 1e-8


def relu(x: Tensor) -> Tensor:
    return T.relu(x)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return T.leaky_relu(x, slope)


def tanh(x: Tensor) -> Tensor:
    return T.tanh(x)


def sigmoid(x: Tensor) -> Tensor:
    return T.sigmoid(x)


def weight_normalize(raw: Tensor, g: Tensor, axis: int = 0, eps: float = WN_EPS) -> Tensor:
    """Rescale each slice of ``raw`` along ``axis`` to direction times ``g``.

    Slice ``i`` becomes ``g[i] * raw_i / sqrt(sum(raw_i**2) + eps)``.
    """
    axis %= raw.ndim
    others = tuple(i for i in range(raw.ndim) if i != axis)
    bshape = [1] * raw.ndim
    bshape[axis] = raw.shape[axis]
    norm = T.sqrt((raw * raw).sum(axis=others, keepdims=True) + eps)
    return raw * (g.reshape(bshape) / norm)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane of an N x C x H x W tensor."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=(2, 3), keepdims=True)
    return d / T.sqrt(var + eps)


def instance_norm_vec(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise version of :func:`instance_norm` for N x D hidden vectors."""
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=1, keepdims=True)
    return d / T.sqrt(var + eps)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    """Per-channel batch normalization for N x C or N x C x H x W input.

    Training mode normalizes with the biased batch statistics and moves the
    running estimates by ``momentum``; eval mode uses the running estimates.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mu = x.mean(axis=axes, keepdims=True)
        d = x - mu
        var = (d * d).mean(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(-1)
        state.running_var = (1 - m) * state.running_var + m * var.data.reshape(-1)
        xhat = d / T.sqrt(var + state.eps)
    else:
        mu = Tensor(state.running_mean.reshape(bshape), dtype=x.dtype)
        sd = Tensor(np.sqrt(state.running_var + state.eps).reshape(bshape), dtype=x.dtype)
        xhat = (x - mu) / sd
    return xhat * state.gamma.reshape(bshape) + state.beta.reshape(bshape)


def init_params(weight_shape: tuple[int, ...], rng: np.random.Generator, *, out_axis: int = 0,
                weight_norm: bool = False, std: float = INIT_STD, dtype=np.float64) -> dict[str, np.ndarray]:
    """Draw raw weights from N(0, std), zero biases, and ``g`` matching the raw norms.

    With ``g`` set to the per-output-group norm the initial effective weight
    equals the raw draw.
    """
    w = (rng.standard_normal(weight_shape) * std).astype(dtype)
    params = {"w": w, "b": np.zeros(weight_shape[out_axis], dtype=dtype)}
    if weight_norm:
        others = tuple(i for i in range(len(weight_shape)) if i != out_axis)
        params["g"] = np.sqrt((w.astype(np.float64) ** 2).sum(axis=others)).astype(dtype)
    return params


class Module:
    """Parameter container; public ``Tensor`` attributes are parameters."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    @contextlib.contextmanager
    def frozen(self):
        """Treat every parameter as a constant while the block runs."""
        params = self.parameters()
        prev = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, prev):
                p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class _WeightLayer(Module):
    _out_axis = 0

    def __init__(self, weight_shape, rng, weight_norm, dtype, std=INIT_STD):
        p = init_params(weight_shape, rng, out_axis=self._out_axis, weight_norm=weight_norm,
                        std=std, dtype=dtype)
        self.w = Tensor(p["w"], requires_grad=True)
        self.b = Tensor(p["b"], requires_grad=True)
        if weight_norm:
            self.g = Tensor(p["g"], requires_grad=True)
        self._weight_norm = weight_norm

    @property
    def weight_normed(self) -> bool:
        return self._weight_norm

    def effective_weight(self) -> Tensor:
        if self._weight_norm:
            return weight_normalize(self.w, self.g, axis=self._out_axis)
        return self.w


class Dense(_WeightLayer):
    """Fully connected layer, ``y = x W^T + b`` with W of shape (out, in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *,
                 weight_norm: bool = False, dtype=np.float64):
        super().__init__((n_out, n_in), rng, weight_norm, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.effective_weight().T) + self.b


class Conv2d(_WeightLayer):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, *, stride: int = 1,
                 pad: int = 0, weight_norm: bool = True, dtype=np.float64):
        super().__init__((c_out, c_in, k, k), rng, weight_norm, dtype)
        self._stride, self._pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.effective_weight(), self._stride, self._pad)
        return y + self.b.reshape(1, -1, 1, 1)


class Deconv2d(_WeightLayer):
    # kernel is (c_in, c_out, k, k); groups for weight norm are output channels
    _out_axis = 1

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, *, stride: int = 1,
                 pad: int = 0, weight_norm: bool = True, dtype=np.float64):
        super().__init__((c_in, c_out, k, k), rng, weight_norm, dtype)
        self._stride, self._pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        y = T.deconv2d(x, self.effective_weight(), self._stride, self._pad)
        return y + self.b.reshape(1, -1, 1, 1)
