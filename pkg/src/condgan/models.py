"""Generators and the three-block conditional discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ConditionTriple
from .layers import (
    Conv2d,
    Deconv2d,
    Dense,
    Module,
    instance_norm_vec,
    leaky_relu,
    relu,
    sigmoid,
    tanh,
)
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "InfoEncoder",
    "GeneratorAbs",
    "GeneratorPartial",
    "Discriminator",
    "combine",
    "l2_baseline_loss",
]


@dataclass
class ModelConfig:
    """Network widths; defaults are the desk-scale 32x32 setup."""

    n_classes: int = 10
    view_dim: int = 4
    transform_dim: int = 3
    image_size: int = 32
    encoder_width: int = 128
    encoder_layers: int = 2
    fused_width: int = 256
    deconv_channels: tuple[int, ...] = (64, 32, 16)
    conv_channels: tuple[int, ...] = (16, 32, 64)
    hidden_dim: int = 128
    head_width: int = 128
    z_dim: int = 32
    z_channels: int = 32
    dropout: float = 0.0
    weight_norm: bool = True
    instance_norm: bool = True
    kernel: int = 4
    # eps for the generators' hidden-vector instance norm; with N(0, 0.02) init the
    # pre-norm variance starts near 1e-8, which the usual 1e-5 would swamp
    norm_eps: float = 1e-12

    def __post_init__(self):
        self.deconv_channels = tuple(self.deconv_channels)
        self.conv_channels = tuple(self.conv_channels)
        n_up = len(self.deconv_channels)
        if self.image_size % (2 ** n_up):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{n_up}")
        if self.image_size % (2 ** len(self.conv_channels)):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{len(self.conv_channels)}")

    @property
    def base_size(self) -> int:
        return self.image_size // 2 ** len(self.deconv_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deconv_channels"] = list(self.deconv_channels)
        d["conv_channels"] = list(self.conv_channels)
        return d


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class InfoEncoder(Module):
    """Per-argument dense encoders whose outputs are concatenated and fused.

    Generators use ReLU inside, the discriminator LeakyReLU.
    """

    def __init__(self, input_dims: Sequence[int], width: int, layers: int, out_dim: int,
                 rng: np.random.Generator, *, leaky: bool, dtype=np.float64):
        self.branches = []
        for d in input_dims:
            dims = [d] + [width] * layers
            self.branches.append(_Stack([Dense(a, b, rng, dtype=dtype) for a, b in zip(dims, dims[1:])]))
        self.fuse = Dense(width * len(input_dims), out_dim, rng, dtype=dtype)
        self._leaky = leaky
        self._dims = tuple(input_dims)

    def _act(self, x: Tensor) -> Tensor:
        return leaky_relu(x) if self._leaky else relu(x)

    def __call__(self, infos: Sequence[Tensor]) -> Tensor:
        if len(infos) != len(self._dims):
            raise ValueError(f"expected {len(self._dims)} information vectors, got {len(infos)}")
        sizes = {len(x) for x in infos}
        if len(sizes) != 1:
            raise T.ShapeError(f"information vectors disagree on batch size: {[x.shape for x in infos]}")
        parts = []
        for x, d, branch in zip(infos, self._dims, self.branches):
            if x.shape[1] != d:
                raise T.ShapeError(f"information vector width {x.shape[1]} != expected {d}")
            h = x
            for layer in branch.layers:
                h = self._act(layer(h))
            parts.append(h)
        return self.fuse(T.concat(parts, axis=1))


class _Stack(Module):
    def __init__(self, layers):
        self.layers = list(layers)


def _infos(cond, dtype) -> list[Tensor]:
    if isinstance(cond, ConditionTriple):
        cond = (cond.c, cond.v, cond.t)
    return [_as_tensor(x, dtype) for x in cond]


class GeneratorAbs(Module):
    """Class/view/transform -> (rgb, mask), for the one-object-per-class regime."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        cfg = self.config = config
        self._dtype = dtype
        ch = cfg.deconv_channels
        info_dims = (cfg.n_classes, cfg.view_dim, cfg.transform_dim)
        self.info = InfoEncoder(info_dims, cfg.encoder_width, cfg.encoder_layers, cfg.fused_width, rng,
                                leaky=False, dtype=dtype)
        self.project = Dense(cfg.fused_width, ch[0] * cfg.base_size ** 2, rng, dtype=dtype)
        wn, k = cfg.weight_norm, cfg.kernel
        self.deconvs = [Deconv2d(a, b, k, rng, stride=2, pad=1, weight_norm=wn, dtype=dtype)
                        for a, b in zip(ch, ch[1:])]
        self.rgb_head = Deconv2d(ch[-1], 3, k, rng, stride=2, pad=1, weight_norm=wn, dtype=dtype)
        self.mask_head = Deconv2d(ch[-1], 1, k, rng, stride=2, pad=1, weight_norm=wn, dtype=dtype)

    def hidden(self, cond) -> Tensor:
        """Fused hidden vector after the pre-deconvolution normalization."""
        h = relu(self.project(relu(self.info(_infos(cond, self._dtype)))))
        return instance_norm_vec(h, self.config.norm_eps) if self.config.instance_norm else h

    def features(self, cond) -> Tensor:
        cfg = self.config
        h = self.hidden(cond)
        x = h.reshape(len(h), cfg.deconv_channels[0], cfg.base_size, cfg.base_size)
        for layer in self.deconvs:
            x = relu(layer(x))
        return x

    def __call__(self, cond) -> tuple[Tensor, Tensor]:
        x = self.features(cond)
        return tanh(self.rgb_head(x)), sigmoid(self.mask_head(x))


class GeneratorPartial(Module):
    """Labels plus noise z -> rgb; z is joined to the label map after reshaping."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, n_labels: int | None = None,
                 dtype=np.float64):
        cfg = self.config = config
        self._dtype = dtype
        self.n_labels = n_labels or cfg.n_classes
        ch, s = cfg.deconv_channels, cfg.base_size
        self.info = InfoEncoder((self.n_labels,), cfg.encoder_width, cfg.encoder_layers, cfg.fused_width, rng,
                                leaky=False, dtype=dtype)
        self.project = Dense(cfg.fused_width, ch[0] * s * s, rng, dtype=dtype)
        self.z_project = Dense(cfg.z_dim, cfg.z_channels * s * s, rng, dtype=dtype)
        wn, k = cfg.weight_norm, cfg.kernel
        widths = (ch[0] + cfg.z_channels,) + ch[1:]
        self.deconvs = [Deconv2d(a, b, k, rng, stride=2, pad=1, weight_norm=wn, dtype=dtype)
                        for a, b in zip(widths, widths[1:])]
        self.rgb_head = Deconv2d(widths[-1], 3, k, rng, stride=2, pad=1, weight_norm=wn, dtype=dtype)

    def _norm(self, h: Tensor) -> Tensor:
        return instance_norm_vec(h, self.config.norm_eps) if self.config.instance_norm else h

    def __call__(self, z, labels) -> Tensor:
        cfg, s = self.config, self.config.base_size
        z = _as_tensor(z, self._dtype)
        if z.ndim != 2 or z.shape[1] != cfg.z_dim:
            raise T.ShapeError(f"z must be N x {cfg.z_dim}, got {z.shape}")
        labels = _infos([labels] if not isinstance(labels, (list, tuple)) else labels, self._dtype)
        n = len(z)
        lab = self._norm(relu(self.project(relu(self.info(labels)))))
        zz = self._norm(relu(self.z_project(z)))
        x = T.concat([lab.reshape(n, cfg.deconv_channels[0], s, s), zz.reshape(n, cfg.z_channels, s, s)], axis=1)
        for layer in self.deconvs:
            x = relu(layer(x))
        return tanh(self.rgb_head(x))


def combine(x_info: Tensor, x_img: Tensor) -> Tensor:
    """Concatenate (x_info * x_img, x_info, x_img) along the feature axis."""
    if x_info.shape != x_img.shape:
        raise T.ShapeError(
            f"x_info {x_info.shape} and x_img {x_img.shape} must have the same dimension to be combined"
        )
    return T.concat([T.hadamard(x_info, x_img), x_info, x_img], axis=1)


class Discriminator(Module):
    """Scores whether an image matches its information vectors.

    Block 1 folds the information vectors into ``x_info``, block 2 folds the
    image into ``x_img`` of the same width, block 3 classifies ``combine``.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, info_dims: Sequence[int] | None = None,
                 image_channels: int = 4, dtype=np.float64):
        cfg = self.config = config
        self._dtype = dtype
        self.info_dims = tuple(info_dims or (cfg.n_classes, cfg.view_dim, cfg.transform_dim))
        self.image_channels = image_channels
        self.info = InfoEncoder(self.info_dims, cfg.encoder_width, cfg.encoder_layers, cfg.hidden_dim, rng,
                                leaky=True, dtype=dtype)
        chans = (image_channels,) + cfg.conv_channels
        self.convs = [Conv2d(a, b, cfg.kernel, rng, stride=2, pad=1, weight_norm=cfg.weight_norm, dtype=dtype)
                      for a, b in zip(chans, chans[1:])]
        final = cfg.image_size // 2 ** len(cfg.conv_channels)
        self.image_dense = Dense(chans[-1] * final * final, cfg.hidden_dim, rng, dtype=dtype)
        self.head = Dense(3 * cfg.hidden_dim, cfg.head_width, rng, dtype=dtype)
        self.out = Dense(cfg.head_width, 1, rng, dtype=dtype)
        self.dropout = cfg.dropout
        self._rng = np.random.default_rng(0)

    def set_rng(self, rng: np.random.Generator) -> None:
        self._rng = rng

    def encode_info(self, cond) -> Tensor:
        return self.info(_infos(cond, self._dtype))

    def image_features(self, x) -> Tensor:
        x = _as_tensor(x, self._dtype)
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (self.image_channels, size, size):
            raise T.ShapeError(f"expected N x {self.image_channels} x {size} x {size} images, got {x.shape}")
        for conv in self.convs:
            x = leaky_relu(conv(x))
            if self.training and self.dropout > 0:
                x = T.dropout(x, self.dropout, self._rng)
        return x.reshape(len(x), -1)

    def encode_image(self, x) -> Tensor:
        return self.image_dense(self.image_features(x))

    def __call__(self, cond, x) -> Tensor:
        corr = combine(self.encode_info(cond), self.encode_image(x))
        return sigmoid(self.out(leaky_relu(self.head(corr))))


def l2_baseline_loss(rgb: Tensor, mask: Tensor, target_rgb, target_mask) -> Tensor:
    """Mean squared error on rgb plus mean squared error on the mask."""
    target_rgb = _as_tensor(target_rgb, rgb.dtype)
    target_mask = _as_tensor(target_mask, mask.dtype)
    if rgb.shape != target_rgb.shape or mask.shape != target_mask.shape:
        raise T.ShapeError(
            f"prediction/target shapes differ: rgb {rgb.shape} vs {target_rgb.shape}, "
            f"mask {mask.shape} vs {target_mask.shape}"
        )
    dr = rgb - target_rgb
    dm = mask - target_mask
    return (dr * dr).mean() + (dm * dm).mean()
