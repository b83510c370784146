"""The finite-difference gradient suite behind ``condgan gradcheck``.

Every differentiable op and layer is checked at 64-bit with h = 1e-5 and
tolerance 1e-4; miniature end-to-end generators and the discriminator are
checked at 1e-3.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .data import ConditionTriple, encode_view
from .layers import (
    BatchNormState,
    Conv2d,
    Deconv2d,
    Dense,
    Module,
    batch_norm,
    instance_norm,
    instance_norm_vec,
    weight_normalize,
)
from .losses import LossWeights, bce, loss_d_neg_t, loss_d_neg_v, loss_d_real, loss_d_total
from .models import Discriminator, GeneratorAbs, GeneratorPartial, ModelConfig
from .tensor import Tensor, grad_check

__all__ = ["CheckResult", "run_suite", "injected_bug", "OP_TOL", "MODEL_TOL", "MINI_CONFIG"]

OP_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5

MINI_CONFIG = ModelConfig(n_classes=3, image_size=8, encoder_width=6, encoder_layers=1, fused_width=8,
                          deconv_channels=(4, 3), conv_channels=(3, 4), hidden_dim=8, head_width=6,
                          z_dim=3, z_channels=2)


@dataclass
class CheckResult:
    name: str
    group: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.group:<6} {self.name:<28} max rel err {self.max_rel_error:.2e} (tol {self.tol:g})"


def _away_from_kinks(x: np.ndarray, points=(0.0,), gap=0.05) -> np.ndarray:
    for p in points:
        x = np.where(np.abs(x - p) < gap, p + 3 * gap, x)
    return x


def _op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, np.ndarray]]:
    o = Tensor(rng.standard_normal((3, 4)))
    x = rng.standard_normal((3, 4))
    yield "add", lambda t: (t + o).sum(), x
    yield "sub", lambda t: (o - t).sum(), x
    yield "neg", lambda t: (-t * o).sum(), x
    yield "mul", lambda t: (t * o[:1]).sum(), x
    yield "div", lambda t: (t / (o * o + 1.0)).sum() + (o / (t * t + 1.0)).sum(), x
    yield "power", lambda t: ((t * t + 1.0) ** 1.5).sum(), x
    yield "exp", lambda t: (T.exp(t) * o).sum(), x
    yield "log", lambda t: T.log(t * t + 0.5).sum(), x
    yield "sqrt", lambda t: T.sqrt(t * t + 0.5).sum(), x
    yield "tanh", lambda t: (T.tanh(t) * o).sum(), x
    yield "sigmoid", lambda t: (T.sigmoid(t) * o).sum(), x
    yield "relu", lambda t: (T.relu(t) * o).sum(), _away_from_kinks(x)
    yield "leaky_relu", lambda t: (T.leaky_relu(t, 0.2) * o).sum(), _away_from_kinks(x)
    yield "clip", lambda t: (T.clip(t, -0.5, 0.5) * o).sum(), _away_from_kinks(x, (-0.5, 0.5))
    yield "dropout", lambda t: (T.dropout(t, 0.5, np.random.default_rng(3)) * o).sum(), x
    yield "reduce_sum", lambda t: (t.sum(axis=0) * o[0]).sum(), x
    yield "reduce_mean", lambda t: (t.mean(axis=1, keepdims=True) * o[:, :1]).sum(), x
    yield "reshape", lambda t: (t.reshape(4, 3) * o.reshape(4, 3)).sum(), x
    yield "transpose", lambda t: (t.T * o.T).sum(), x
    yield "take", lambda t: (t[1:, ::2] * o[1:, ::2]).sum(), x
    yield "concat", lambda t: (T.concat([t, o, t], axis=1) ** 2).sum(), x
    yield "matmul", lambda t: T.tanh(T.matmul(t, o.T)).sum(), x
    yield "hadamard", lambda t: (T.hadamard(t, o) * t).sum(), x
    w = rng.standard_normal((2, 2, 4, 4))
    xi = rng.standard_normal((1, 2, 6, 6))
    up = Tensor(rng.standard_normal(T.conv2d(Tensor(xi), Tensor(w), 2, 1).shape))
    yield "conv2d/input", lambda t: (T.conv2d(t, Tensor(w), 2, 1) * up).sum(), xi
    yield "conv2d/weight", lambda t: (T.conv2d(Tensor(xi), t, 2, 1) * up).sum(), w
    xd = rng.standard_normal((1, 2, 3, 3))
    upd = Tensor(rng.standard_normal(T.deconv2d(Tensor(xd), Tensor(w), 2, 1).shape))
    yield "deconv2d/input", lambda t: (T.deconv2d(t, Tensor(w), 2, 1) * upd).sum(), xd
    yield "deconv2d/weight", lambda t: (T.deconv2d(Tensor(xd), t, 2, 1) * upd).sum(), w


def _randomize(module: Module, rng: np.random.Generator, scale: float) -> None:
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * scale


def _owner(module: Module, p: Tensor) -> tuple[Module, str]:
    for m in module.modules():
        for key, val in vars(m).items():
            if val is p:
                return m, key
    raise KeyError("parameter not owned by module")


def param_checks(module: Module, forward: Callable[[], Tensor]) -> Iterator[tuple[str, Callable, np.ndarray]]:
    """One case per parameter: swap a probe tensor in, run ``forward``, swap back."""
    for name, p in module.named_parameters():
        owner, attr = _owner(module, p)

        def f(t, owner=owner, attr=attr, p=p):
            setattr(owner, attr, t)
            try:
                return forward()
            finally:
                setattr(owner, attr, p)

        yield name, f, p.data.copy()


def _layer_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, np.ndarray]]:
    g = Tensor(rng.uniform(0.5, 2, 3))
    raw = rng.standard_normal((3, 4))
    up = Tensor(rng.standard_normal((3, 4)))
    yield "weight_normalize/raw", lambda t: (weight_normalize(t, g) * up).sum(), raw
    yield "weight_normalize/g", lambda t: (weight_normalize(Tensor(raw), t) * up).sum(), g.data
    up4 = Tensor(rng.standard_normal((2, 2, 3, 3)))
    yield "instance_norm", lambda t: (instance_norm(t) * up4).sum(), rng.standard_normal((2, 2, 3, 3))
    up2 = Tensor(rng.standard_normal((3, 6)))
    yield "instance_norm_vec", lambda t: (instance_norm_vec(t) * up2).sum(), rng.standard_normal((3, 6))
    state = BatchNormState.create(3)
    upb = Tensor(rng.standard_normal((5, 3)))
    yield "batch_norm", lambda t: (batch_norm(t, state, True) * upb).sum(), rng.standard_normal((5, 3))
    yield "bce", lambda t: bce(T.sigmoid(t), 1) + bce(T.sigmoid(t), 0), rng.standard_normal(4)

    layers = {
        "dense": (Dense(4, 3, rng), (2, 4)),
        "dense_wn": (Dense(4, 3, rng, weight_norm=True), (2, 4)),
        "conv2d_wn": (Conv2d(2, 3, 4, rng, stride=2, pad=1), (1, 2, 6, 6)),
        "deconv2d_wn": (Deconv2d(2, 3, 4, rng, stride=2, pad=1), (1, 2, 3, 3)),
    }
    for lname, (layer, shape) in layers.items():
        _randomize(layer, rng, 1.0)
        x0 = rng.standard_normal(shape)
        upl = Tensor(rng.standard_normal(layer(Tensor(x0)).shape))
        yield f"{lname}/input", lambda t, layer=layer, upl=upl: (layer(t) * upl).sum(), x0
        for pname, f, p0 in param_checks(layer, lambda layer=layer, x0=x0, upl=upl: (layer(Tensor(x0)) * upl).sum()):
            yield f"{lname}/{pname}", f, p0


def mini_conditions(n: int, k: int, rng: np.random.Generator) -> ConditionTriple:
    c = np.eye(k)[rng.integers(0, k, n)]
    v = encode_view(rng.uniform(0, 2 * np.pi, n), rng.uniform(-0.5, 0.5, n))
    return ConditionTriple(c, v, rng.uniform(-0.1, 0.1, (n, 3)))


def _model_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, np.ndarray]]:
    cfg = MINI_CONFIG
    cond = mini_conditions(2, cfg.n_classes, rng)

    G = GeneratorAbs(cfg, rng)
    _randomize(G, rng, 0.7)
    up_r = rng.standard_normal((2, 3, 8, 8))
    up_m = rng.standard_normal((2, 1, 8, 8))

    def g_abs():
        rgb, mask = G(cond)
        return (rgb * up_r).sum() + (mask * up_m).sum()

    for name, f, p0 in param_checks(G, g_abs):
        yield f"G_abs/{name}", f, p0

    P = GeneratorPartial(cfg, rng)
    _randomize(P, rng, 0.7)
    z = rng.standard_normal((2, cfg.z_dim))
    up_p = rng.standard_normal((2, 3, 8, 8))
    yield "G_partial/z", lambda t: (P(t, cond.c) * up_p).sum(), z
    for name, f, p0 in param_checks(P, lambda: (P(z, cond.c) * up_p).sum()):
        yield f"G_partial/{name}", f, p0

    D = Discriminator(cfg, rng)
    # keep D's scores away from 0 and 1: log(1 - p) near p = 1 loses digits the
    # central difference then amplifies by 1/h
    _randomize(D, rng, 0.3)
    x = rng.standard_normal((2, 4, 8, 8))
    v_neg = encode_view(rng.uniform(0, 6, 2), rng.uniform(0, 0.5, 2))
    t_neg = rng.uniform(-0.1, 0.1, (2, 3))
    w = LossWeights()

    def d_total(img):
        comps = {"real": loss_d_real(D, cond, img), "neg_v": loss_d_neg_v(D, cond, v_neg, img),
                 "neg_t": loss_d_neg_t(D, cond, t_neg, img)}
        return loss_d_total(comps, w)

    yield "D/image", d_total, x
    for name, f, p0 in param_checks(D, lambda: d_total(x)):
        yield f"D/{name}", f, p0


def run_suite(seed: int = 0, groups=("op", "layer", "model"), report: Callable[[str], None] | None = None
              ) -> list[CheckResult]:
    """Run every gradient check; ``report`` receives one line per check as it finishes."""
    rng = np.random.default_rng(seed)
    sources = {"op": (_op_cases, OP_TOL), "layer": (_layer_cases, OP_TOL), "model": (_model_cases, MODEL_TOL)}
    results = []
    for group in groups:
        make, tol = sources[group]
        for name, f, x0 in make(rng):
            rep = grad_check(f, x0, h=STEP, tol=tol)
            res = CheckResult(name, group, rep.max_rel_error, tol)
            results.append(res)
            if report:
                report(res.line())
    return results


@contextlib.contextmanager
def injected_bug():
    """Temporarily give tanh a wrong derivative (1 - y instead of 1 - y^2)."""
    original = T.tanh

    def bad_tanh(a):
        out = np.tanh(a.data)
        return T._node(out, (a,), lambda g: (g * (1.0 - out),), "tanh")

    T.tanh = bad_tanh
    try:
        yield
    finally:
        T.tanh = original
