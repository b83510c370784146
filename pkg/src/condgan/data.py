"""Procedural chair renderer and the conditional dataset built on it.

Each class is one fixed box-assembly chair (seat, back, legs). A sample is
that chair viewed orthographically from a given azimuth/altitude, then
shifted and scaled in the image plane by a transformation vector.
"""

from __future__ import annotations

import colorsys
import csv
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeSpec",
    "ViewPoint",
    "Transform",
    "ConditionTriple",
    "Sample",
    "Batch",
    "encode_view",
    "decode_view",
    "render",
    "ChairDataset",
    "Subset",
    "holdout_split",
    "NegativeSampler",
    "write_ppm",
    "to_uint8",
    "export_dataset",
    "TRANSFORM_BOUNDS",
    "BACKGROUND",
]

TWO_PI = 2.0 * math.pi
# hard limits on |dx|, |dy| (fraction of image size) and |log_scale|
TRANSFORM_BOUNDS = np.array([0.15, 0.15, 0.2])
# range the dataset actually draws from
TRANSFORM_DRAW = np.array([0.08, 0.08, 0.1])
BACKGROUND = 1.0
_FIT = 0.85
_LIGHT = np.array([0.3, 0.6, 0.75]) / np.linalg.norm([0.3, 0.6, 0.75])


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    legs: int
    seat_width: float
    seat_depth: float
    leg_height: float
    back_height: float
    color: tuple[float, float, float]

    @classmethod
    def for_class(cls, class_id: int) -> ShapeSpec:
        """Geometry is a fixed function of the class id, independent of any seed."""
        if class_id < 0:
            raise ValueError(f"class id must be non-negative, got {class_id}")
        legs = 3 + class_id % 3
        u = ((class_id * 0.618034) % 1.0, (class_id * 0.414214) % 1.0, (class_id * 0.732051) % 1.0)
        hue = (class_id * 0.381966) % 1.0
        color = colorsys.hsv_to_rgb(hue, 0.75, 0.85)
        return cls(
            class_id=class_id,
            legs=legs,
            seat_width=0.7 + 0.4 * u[0],
            seat_depth=0.6 + 0.4 * u[1],
            leg_height=0.4 + 0.4 * u[2],
            back_height=0.3 + 0.6 * ((class_id * 0.5) % 1.0 * 0.5 + u[1] * 0.5),
            color=tuple(float(x) for x in color),
        )

    def boxes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Axis-aligned boxes as (center, half-extents), y up, centered on the origin."""
        th = 0.08
        sw, sd, lh, bh = self.seat_width, self.seat_depth, self.leg_height, self.back_height
        total = lh + th + bh
        y0 = -total / 2
        out = [(np.array([0.0, y0 + lh + th / 2, 0.0]), np.array([sw / 2, th / 2, sd / 2]))]
        out.append((np.array([0.0, y0 + lh + th + bh / 2, -sd / 2 + th / 2]),
                    np.array([sw / 2, bh / 2, th / 2])))
        leg = 0.05
        for k in range(self.legs):
            ang = math.pi / 4 + TWO_PI * k / self.legs
            x = (sw / 2 - leg) * math.copysign(min(1.0, abs(math.cos(ang)) * math.sqrt(2)), math.cos(ang))
            z = (sd / 2 - leg) * math.copysign(min(1.0, abs(math.sin(ang)) * math.sqrt(2)), math.sin(ang))
            out.append((np.array([x, y0 + lh / 2, z]), np.array([leg, lh / 2, leg])))
        return out


@dataclass(frozen=True)
class ViewPoint:
    azimuth: float
    altitude: float

    def __post_init__(self):
        if not -math.pi / 4 - 1e-12 <= self.altitude <= math.pi / 4 + 1e-12:
            raise ValueError(f"altitude {self.altitude} outside [-pi/4, pi/4]")


@dataclass(frozen=True)
class Transform:
    dx: float = 0.0
    dy: float = 0.0
    log_scale: float = 0.0

    def __post_init__(self):
        if np.any(np.abs(self.vector()) > TRANSFORM_BOUNDS + 1e-12):
            raise ValueError(f"transform {self.vector()} exceeds bounds {TRANSFORM_BOUNDS}")

    def vector(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.log_scale])


def encode_view(azimuth, altitude) -> np.ndarray:
    """[sin az, cos az, sin alt, cos alt]; vectorizes over array input."""
    az = np.asarray(azimuth, dtype=np.float64)
    alt = np.asarray(altitude, dtype=np.float64)
    return np.stack([np.sin(az), np.cos(az), np.sin(alt), np.cos(alt)], axis=-1)


def decode_view(v, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=np.float64)
    for a, b in ((0, 1), (2, 3)):
        r = v[..., a] ** 2 + v[..., b] ** 2
        if np.any(np.abs(r - 1.0) > tol):
            raise ValidationError(f"view components {a},{b} are not a unit sin/cos pair")
    az = np.mod(np.arctan2(v[..., 0], v[..., 1]), TWO_PI)
    alt = np.arctan2(v[..., 2], v[..., 3])
    if az.ndim == 0:
        return float(az), float(alt)
    return az, alt


@dataclass
class ConditionTriple:
    """Batched conditions: class one-hots (N,K), views (N,4), transforms (N,T)."""

    c: np.ndarray
    v: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        n = {len(self.c), len(self.v), len(self.t)}
        if len(n) != 1:
            raise ValidationError(f"batch sizes differ: c {len(self.c)}, v {len(self.v)}, t {len(self.t)}")

    def __len__(self) -> int:
        return len(self.c)

    def validate(self, atol: float = 1e-6) -> None:
        if not (np.all((self.c == 0) | (self.c == 1)) and np.all(self.c.sum(axis=1) == 1)):
            raise ValidationError("class vectors must be one-hot")
        for a, b in ((0, 1), (2, 3)):
            if np.any(np.abs(self.v[:, a] ** 2 + self.v[:, b] ** 2 - 1.0) > atol):
                raise ValidationError("view vectors must hold unit sin/cos pairs")

    @property
    def labels(self) -> np.ndarray:
        return self.c.argmax(axis=1)

    def replace(self, c=None, v=None, t=None) -> ConditionTriple:
        return ConditionTriple(self.c if c is None else c, self.v if v is None else v,
                               self.t if t is None else t)


@dataclass
class Sample:
    rgb: np.ndarray
    mask: np.ndarray
    condition: ConditionTriple
    class_id: int
    view: ViewPoint
    transform: Transform


@dataclass
class Batch:
    rgb: np.ndarray
    mask: np.ndarray
    cond: ConditionTriple
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.rgb)

    @property
    def image(self) -> np.ndarray:
        """RGB and mask stacked on the channel axis (N, 4, H, W)."""
        return np.concatenate([self.rgb, self.mask], axis=1)


def _rotation(az: float, alt: float) -> np.ndarray:
    ca, sa, ce, se = math.cos(az), math.sin(az), math.cos(alt), math.sin(alt)
    yaw = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    return tilt @ yaw


_CORNERS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
# corner indices per face, counter-clockwise seen from outside
_FACES = [
    ((0, 1, 3, 2), (-1, 0, 0)), ((4, 6, 7, 5), (1, 0, 0)),
    ((0, 4, 5, 1), (0, -1, 0)), ((2, 3, 7, 6), (0, 1, 0)),
    ((0, 2, 6, 4), (0, 0, -1)), ((1, 5, 7, 3), (0, 0, 1)),
]


@lru_cache(maxsize=8)
def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    return np.meshgrid(xs, ys)


def render(spec: ShapeSpec, view: ViewPoint, tr: Transform, h: int = 32, w: int = 32
           ) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize ``spec`` to (rgb 3xHxW in [-1,1], mask 1xHxW in {0,1})."""
    if h < 4 or w < 4:
        raise ValueError(f"image extent must be at least 4x4, got {h}x{w}")
    az = round(math.fmod(view.azimuth, TWO_PI) % TWO_PI, 12)
    rot = _rotation(az, view.altitude)
    scale = _FIT * math.exp(tr.log_scale)
    shift = np.array([2.0 * tr.dx, 2.0 * tr.dy])
    px, py = _pixel_grid(h, w)

    polys = []
    for center, half in spec.boxes():
        corners = (_CORNERS * half + center) @ rot.T
        for idx, normal in _FACES:
            n = rot @ np.array(normal, dtype=float)
            if n[2] <= 1e-9:
                continue
            quad = corners[list(idx)]
            shade = 0.45 + 0.55 * max(0.0, float(n @ _LIGHT))
            polys.append((float(quad[:, 2].mean()), quad[:, :2] * scale + shift, shade))
    polys.sort(key=lambda p: p[0])

    rgb = np.full((3, h, w), BACKGROUND)
    mask = np.zeros((1, h, w))
    base = np.array(spec.color)
    for _, q, shade in polys:
        inside = np.ones((h, w), dtype=bool)
        for k in range(4):
            (x0, y0), (x1, y1) = q[k], q[(k + 1) % 4]
            inside &= (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0.0
        if inside.any():
            col = 2.0 * base * shade - 1.0
            rgb[:, inside] = col[:, None]
            mask[0, inside] = 1.0
    return rgb, mask


class ChairDataset:
    """Every (class, azimuth, altitude, transform) combination, rendered lazily.

    Index order is class-major, then azimuth, altitude and transform. Sample
    ``i`` depends only on ``(seed, i)``.
    """

    def __init__(self, seed: int = 0, n_classes: int = 10, n_azimuths: int = 36, n_altitudes: int = 3,
                 transforms_per_view: int = 2, image_size: int = 32):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.seed = seed
        self.n_classes = n_classes
        self.n_azimuths = n_azimuths
        self.n_altitudes = n_altitudes
        self.transforms_per_view = transforms_per_view
        self.image_size = image_size
        self.azimuths = np.arange(n_azimuths) * (TWO_PI / n_azimuths)
        self.altitudes = (np.linspace(math.pi / 18, math.pi / 6, n_altitudes)
                          if n_altitudes > 1 else np.array([math.pi / 9]))
        self._cache: dict[int, Sample] = {}

    @property
    def views_per_class(self) -> int:
        return self.n_azimuths * self.n_altitudes

    def __len__(self) -> int:
        return self.n_classes * self.views_per_class * self.transforms_per_view

    def unravel(self, index: int) -> tuple[int, int, int, int]:
        """index -> (class, azimuth index, altitude index, transform index)."""
        if not 0 <= index < len(self):
            raise IndexError(f"index {index} out of range for dataset of size {len(self)}")
        return tuple(int(i) for i in np.unravel_index(
            index, (self.n_classes, self.n_azimuths, self.n_altitudes, self.transforms_per_view)))

    def transform_for(self, index: int) -> Transform:
        rng = np.random.default_rng([self.seed, index])
        dx, dy, ls = rng.uniform(-TRANSFORM_DRAW, TRANSFORM_DRAW)
        return Transform(float(dx), float(dy), float(ls))

    def __getitem__(self, index: int) -> Sample:
        index = int(index)
        if index < 0:
            index += len(self)
        if index in self._cache:
            return self._cache[index]
        cls, ai, ei, _ = self.unravel(index)
        view = ViewPoint(float(self.azimuths[ai]), float(self.altitudes[ei]))
        tr = self.transform_for(index)
        rgb, mask = render(ShapeSpec.for_class(cls), view, tr, self.image_size, self.image_size)
        c = np.zeros((1, self.n_classes))
        c[0, cls] = 1.0
        cond = ConditionTriple(c, encode_view(view.azimuth, view.altitude)[None], tr.vector()[None])
        sample = Sample(rgb, mask, cond, cls, view, tr)
        self._cache[index] = sample
        return sample

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def azimuth_index(self, index: int) -> int:
        return self.unravel(index)[1]

    def batch(self, indices: Sequence[int], dtype=np.float64) -> Batch:
        samples = [self[int(i)] for i in indices]
        return Batch(
            rgb=np.stack([s.rgb for s in samples]).astype(dtype),
            mask=np.stack([s.mask for s in samples]).astype(dtype),
            cond=ConditionTriple(
                np.concatenate([s.condition.c for s in samples]).astype(dtype),
                np.concatenate([s.condition.v for s in samples]).astype(dtype),
                np.concatenate([s.condition.t for s in samples]).astype(dtype),
            ),
            indices=np.asarray(indices, dtype=np.int64),
        )


class Subset:
    """A fixed list of indices into a :class:`ChairDataset`."""

    def __init__(self, base: ChairDataset, indices: Sequence[int]):
        self.base = base
        self.indices = np.asarray(indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> Sample:
        return self.base[int(self.indices[i])]

    def batch(self, positions: Sequence[int], dtype=np.float64) -> Batch:
        return self.base.batch(self.indices[np.asarray(positions, dtype=np.int64)], dtype)

    @property
    def n_classes(self) -> int:
        return self.base.n_classes

    @property
    def image_size(self) -> int:
        return self.base.image_size

    @property
    def azimuths(self) -> np.ndarray:
        idx = sorted({self.base.azimuth_index(int(i)) for i in self.indices})
        return self.base.azimuths[idx]

    @property
    def altitudes(self) -> np.ndarray:
        return self.base.altitudes


def holdout_split(dataset: ChairDataset) -> tuple[Subset, Subset]:
    """Odd azimuth indices go to the test side, even ones to training."""
    if dataset.n_azimuths % 2:
        raise ValueError(f"holdout split needs an even azimuth count, got {dataset.n_azimuths}")
    az = np.array([dataset.azimuth_index(i) for i in range(len(dataset))])
    idx = np.arange(len(dataset))
    return Subset(dataset, idx[az % 2 == 0]), Subset(dataset, idx[az % 2 == 1])


class NegativeSampler:
    """Draws wrong conditions for negative sampling.

    Classes come uniformly from the K-1 wrong ones. Views and transforms are
    fresh draws from the data distribution: azimuth and altitude from the
    dataset grids, transform uniform over the dataset's draw range.
    """

    def __init__(self, n_classes: int, azimuths: np.ndarray, altitudes: np.ndarray,
                 transform_range: np.ndarray = TRANSFORM_DRAW):
        if n_classes < 2:
            raise ValueError("negative class sampling needs at least two classes")
        self.n_classes = n_classes
        self.azimuths = np.asarray(azimuths, dtype=np.float64)
        self.altitudes = np.asarray(altitudes, dtype=np.float64)
        self.transform_range = np.asarray(transform_range, dtype=np.float64)

    @classmethod
    def from_dataset(cls, ds: ChairDataset | Subset) -> NegativeSampler:
        return cls(ds.n_classes, ds.azimuths, ds.altitudes)

    def classes(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        offset = rng.integers(1, self.n_classes, size=len(labels))
        return (np.asarray(labels) + offset) % self.n_classes

    def one_hot(self, labels: np.ndarray, dtype=np.float64) -> np.ndarray:
        out = np.zeros((len(labels), self.n_classes), dtype=dtype)
        out[np.arange(len(labels)), labels] = 1.0
        return out

    def views(self, n: int, rng: np.random.Generator) -> np.ndarray:
        az = self.azimuths[rng.integers(0, len(self.azimuths), size=n)]
        alt = self.altitudes[rng.integers(0, len(self.altitudes), size=n)]
        return encode_view(az, alt)

    def transforms(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.transform_range, self.transform_range, size=(n, 3))

    def __call__(self, cond: ConditionTriple, rng: np.random.Generator) -> ConditionTriple:
        """(c', v', t') for every row of ``cond``; v' and t' are independent draws."""
        n, dtype = len(cond), cond.c.dtype
        c_neg = self.one_hot(self.classes(cond.labels, rng), dtype)
        return ConditionTriple(c_neg, self.views(n, rng).astype(dtype), self.transforms(n, rng).astype(dtype))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map a C x H x W image in [-1, 1] to H x W x 3 bytes; one channel is replicated."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Binary P6 with maxval 255; ``pixels`` is H x W x 3 uint8."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


MANIFEST_HEADER = ["index", "class", "azimuth", "altitude", "dx", "dy", "log_scale", "split"]


def export_dataset(dataset: ChairDataset, out_dir: str | os.PathLike) -> str:
    """Write one PPM per sample plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for i in range(len(dataset)):
            s = dataset[i]
            write_ppm(os.path.join(out_dir, f"{i:05d}.ppm"), to_uint8(s.rgb))
            split = "test" if dataset.azimuth_index(i) % 2 else "train"
            writer.writerow([i, s.class_id, repr(s.view.azimuth), repr(s.view.altitude),
                             repr(s.transform.dx), repr(s.transform.dy), repr(s.transform.log_scale), split])
    return manifest
