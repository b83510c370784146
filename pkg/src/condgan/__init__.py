"""Conditional GAN with negative sampling, built on a small numpy autodiff engine.

Modules, bottom up: ``tensor`` (autodiff), ``layers``, ``models``, ``losses``,
``data`` (procedural chairs), ``train``, ``evaluate``, ``gradsuite`` and ``cli``.
"""

from .data import ChairDataset, ConditionTriple, holdout_split
from .losses import LossWeights
from .models import Discriminator, GeneratorAbs, GeneratorPartial, ModelConfig
from .tensor import Tensor
from .train import TrainConfig, train_gan, train_l2

__version__ = "0.1.0"

__all__ = [
    "ChairDataset",
    "ConditionTriple",
    "Discriminator",
    "GeneratorAbs",
    "GeneratorPartial",
    "LossWeights",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "holdout_split",
    "train_gan",
    "train_l2",
]
