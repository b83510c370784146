"""Adversarial and negative-sampling losses for the conditional discriminator.

All losses are batch means. Negative view/transform losses weight each
sample's cross-entropy by the squared distance between the true and the
substituted condition vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ConditionTriple
from .models import Discriminator, GeneratorAbs, GeneratorPartial
from .tensor import Tensor

__all__ = [
    "LossWeights",
    "PROB_CLAMP",
    "bce",
    "bce_per_sample",
    "synthesize",
    "disc_infos",
    "loss_g",
    "loss_d_gen",
    "loss_d_real",
    "negative_c",
    "loss_d_neg_c",
    "loss_d_neg_v",
    "loss_d_neg_t",
    "loss_d_total",
    "COMPONENTS",
]

PROB_CLAMP = 1e-7
COMPONENTS = ("real", "gen", "neg_c", "neg_v", "neg_t")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma_c: float = 1.0
    gamma_v: float = 0.5
    gamma_t: float = 0.5

    def __post_init__(self):
        for name, val in self.as_dict().items():
            if val < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {val}")
        if self.alpha <= 0 and self.beta <= 0:
            raise ValueError("at least one of alpha, beta must be positive")

    def as_dict(self) -> dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma_c": self.gamma_c,
                "gamma_v": self.gamma_v, "gamma_t": self.gamma_t}

    def for_component(self) -> dict[str, float]:
        return dict(zip(COMPONENTS, self.as_dict().values()))


def bce_per_sample(p: Tensor, y: float) -> Tensor:
    """-(y log p + (1-y) log(1-p)) per row, with p clamped to [1e-7, 1-1e-7]."""
    pc = T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP).reshape(-1)
    if y == 1:
        return -T.log(pc)
    if y == 0:
        return -T.log(1.0 - pc)
    return -(T.log(pc) * y + T.log(1.0 - pc) * (1.0 - y))


def bce(p: Tensor, y: float) -> Tensor:
    return bce_per_sample(p, y).mean()


def disc_infos(D: Discriminator, cond: ConditionTriple) -> tuple:
    """Information vectors ``D`` consumes: (c, v, t), or just c in the partial case."""
    if len(D.info_dims) == 1:
        return (cond.c,)
    return (cond.c, cond.v, cond.t)


def synthesize(G, cond: ConditionTriple, z=None) -> Tensor:
    """Generator output in the layout the discriminator reads."""
    if isinstance(G, GeneratorAbs):
        rgb, mask = G(cond)
        return T.concat([rgb, mask], axis=1)
    if isinstance(G, GeneratorPartial):
        if z is None:
            raise ValueError("the partially conditional generator needs z")
        return G(z, cond.c)
    raise TypeError(f"unknown generator type {type(G).__name__}")


def loss_g(D: Discriminator, G, cond: ConditionTriple, z=None) -> Tensor:
    """Generator loss: push D's score on generated samples toward 1. D is held constant."""
    with D.frozen():
        return bce(D(disc_infos(D, cond), synthesize(G, cond, z)), 1)


def loss_d_gen(D: Discriminator, G, cond: ConditionTriple, z=None) -> Tensor:
    with T.no_grad():
        fake = synthesize(G, cond, z)
    return bce(D(disc_infos(D, cond), fake), 0)


def loss_d_real(D: Discriminator, cond: ConditionTriple, x) -> Tensor:
    return bce(D(disc_infos(D, cond), x), 1)


def negative_c(cond: ConditionTriple, rng: np.random.Generator) -> ConditionTriple:
    """Replace every class with a uniformly drawn different one."""
    k = cond.c.shape[1]
    if k < 2:
        raise ValueError("negative class sampling needs at least two classes")
    labels = cond.labels
    wrong = (labels + rng.integers(1, k, size=len(labels))) % k
    c = np.zeros_like(cond.c)
    c[np.arange(len(labels)), wrong] = 1.0
    return cond.replace(c=c)


def loss_d_neg_c(D: Discriminator, cond_neg: ConditionTriple, x) -> Tensor:
    return bce(D(disc_infos(D, cond_neg), x), 0)


def _distance_weighted(D: Discriminator, cond_neg: ConditionTriple, x, weight: np.ndarray) -> Tensor:
    per = bce_per_sample(D(disc_infos(D, cond_neg), x), 0)
    return (per * np.asarray(weight, dtype=per.dtype)).mean()


def loss_d_neg_v(D: Discriminator, cond: ConditionTriple, v_neg, x) -> Tensor:
    v_neg = np.asarray(v_neg, dtype=cond.v.dtype)
    weight = ((cond.v - v_neg) ** 2).sum(axis=1)
    return _distance_weighted(D, cond.replace(v=v_neg), x, weight)


def loss_d_neg_t(D: Discriminator, cond: ConditionTriple, t_neg, x) -> Tensor:
    t_neg = np.asarray(t_neg, dtype=cond.t.dtype)
    weight = ((cond.t - t_neg) ** 2).sum(axis=1)
    return _distance_weighted(D, cond.replace(t=t_neg), x, weight)


def loss_d_total(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum over whichever of real/gen/neg_c/neg_v/neg_t are present."""
    w = weights.for_component()
    unknown = components.keys() - w.keys()
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    total = None
    for name in COMPONENTS:
        if name not in components:
            continue
        term = components[name] * w[name]
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components given")
    return total
