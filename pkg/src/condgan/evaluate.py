"""Evaluation metrics: masked L2 to ground truth, sharpness, discriminator accuracy."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import Batch, ChairDataset, NegativeSampler, Subset
from .losses import disc_infos
from .models import Discriminator, GeneratorAbs

__all__ = [
    "masked_l2",
    "sharpness",
    "generate",
    "generator_l2",
    "discriminator_accuracy",
    "DiscAccuracy",
]


def masked_l2(pred_rgb, true_rgb, true_mask) -> float:
    """Mean squared RGB error over the pixels the ground-truth mask covers.

    Arrays are N x 3 x H x W (rgb) and N x 1 x H x W (mask).
    """
    pred_rgb = np.asarray(pred_rgb, dtype=np.float64)
    true_rgb = np.asarray(true_rgb, dtype=np.float64)
    m = np.asarray(true_mask, dtype=np.float64) > 0.5
    if pred_rgb.shape != true_rgb.shape:
        raise T.ShapeError(f"prediction {pred_rgb.shape} vs target {true_rgb.shape}")
    covered = np.broadcast_to(m, pred_rgb.shape)
    if not covered.any():
        raise ValueError("ground-truth mask is empty")
    return float(((pred_rgb - true_rgb) ** 2)[covered].mean())


def sharpness(images) -> float:
    """Mean gradient magnitude of N x C x H x W images (forward differences, cropped to overlap)."""
    x = np.asarray(images, dtype=np.float64)
    gx = x[..., :-1, 1:] - x[..., :-1, :-1]
    gy = x[..., 1:, :-1] - x[..., :-1, :-1]
    return float(np.sqrt(gx * gx + gy * gy).mean())


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield np.arange(i, min(i + size, n))


def generate(G: GeneratorAbs, data: ChairDataset | Subset, batch_size: int = 64, dtype=np.float32):
    """Generator rgb for every sample of ``data`` alongside the ground truth."""
    preds, rgbs, masks = [], [], []
    with T.no_grad():
        for idx in _batches(len(data), batch_size):
            b = data.batch(idx, dtype)
            rgb, _ = G(b.cond)
            preds.append(rgb.data)
            rgbs.append(b.rgb)
            masks.append(b.mask)
    return np.concatenate(preds), np.concatenate(rgbs), np.concatenate(masks)


def generator_l2(G: GeneratorAbs, data, batch_size: int = 64, dtype=np.float32) -> float:
    pred, rgb, mask = generate(G, data, batch_size, dtype)
    return masked_l2(pred, rgb, mask)


class DiscAccuracy(dict):
    """``matched``, ``mismatched`` and their mean ``balanced``."""


def discriminator_accuracy(D: Discriminator, data: ChairDataset | Subset, seed: int = 0,
                           batch_size: int = 64, dtype=np.float32) -> DiscAccuracy:
    """Score every sample with its true class and with a random wrong class.

    Matched pairs count as correct when D > 0.5, mismatched ones when D < 0.5.
    Images are the real rendered ones (rgb + mask when D reads 4 channels).
    """
    rng = np.random.default_rng([seed, 3])
    sampler = NegativeSampler(data.n_classes, np.zeros(1), np.zeros(1))
    was_training = D.training
    D.eval()
    hit_m, hit_x, n = 0, 0, 0
    try:
        with T.no_grad():
            for idx in _batches(len(data), batch_size):
                b: Batch = data.batch(idx, dtype)
                x = b.image if D.image_channels == 4 else b.rgb
                wrong = b.cond.replace(c=sampler.one_hot(sampler.classes(b.cond.labels, rng), dtype))
                hit_m += int((D(disc_infos(D, b.cond), x).data > 0.5).sum())
                hit_x += int((D(disc_infos(D, wrong), x).data < 0.5).sum())
                n += len(b)
    finally:
        D.train(was_training)
    out = DiscAccuracy(matched=hit_m / n, mismatched=hit_x / n)
    out["balanced"] = 0.5 * (out["matched"] + out["mismatched"])
    return out
