"""Adversarial and l2 training loops, Adam, and the checkpoint format.

Checkpoint layout (little-endian)::

    b"CGAN" | version u16 | count u32 | count x tensor record
    tensor record: name_len u16 | name utf-8 | rank u8 | rank x extent u32 | float32 data

A training checkpoint stores both networks, both optimizer states and the
loop counters under prefixed names, so a run can resume at an epoch
boundary and continue exactly as an uninterrupted run would.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, ChairDataset, ConditionTriple, NegativeSampler, Subset, holdout_split
from .layers import Module
from .losses import LossWeights, bce_per_sample, disc_infos, loss_g, synthesize
from .models import Discriminator, GeneratorAbs, GeneratorPartial, ModelConfig, l2_baseline_loss
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "Adam",
    "GANTrainer",
    "L2Trainer",
    "TrainResult",
    "train_gan",
    "train_l2",
    "checkpoint_save",
    "checkpoint_load",
    "CheckpointError",
    "METRICS_HEADER",
    "L2_METRICS_HEADER",
]

log = logging.getLogger(__name__)

MAGIC = b"CGAN"
VERSION = 1
METRICS_HEADER = ["epoch", "step", "loss_g", "loss_d_real", "loss_d_gen", "loss_neg_c",
                  "loss_neg_v", "loss_neg_t", "loss_d_total"]
L2_METRICS_HEADER = ["epoch", "step", "loss_l2"]
_METRIC_KEYS = {"real": "loss_d_real", "gen": "loss_d_gen", "neg_c": "loss_neg_c",
                "neg_v": "loss_neg_v", "neg_t": "loss_neg_t", "total": "loss_d_total"}


class CheckpointError(ValueError):
    pass


# -- checkpoint format ---------------------------------------------------------

def checkpoint_save(params: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def checkpoint_load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, count = read("<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = read("<H")
        if pos + nlen > len(data):
            raise CheckpointError(f"{path}: truncated name")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<B")
        shape = read(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float = 2e-4,
              beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8,
              names: Sequence[str] | None = None) -> AdamState:
    """One bias-corrected Adam update applied to ``params`` in place."""
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {params[i].shape}")
        if not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            raise T.NumericError(f"non-finite gradient for parameter {label}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


class Adam:
    def __init__(self, module: Module, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8):
        named = module.named_parameters()
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps, self.names)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for n, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"{prefix}.m.{n}"] = m
            out[f"{prefix}.v.{n}"] = v
        out[f"{prefix}.step"] = np.array([self.state.step], dtype=np.float32)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        for i, n in enumerate(self.names):
            self.state.m[i] = state[f"{prefix}.m.{n}"].astype(self.params[i].dtype)
            self.state.v[i] = state[f"{prefix}.v.{n}"].astype(self.params[i].dtype)
        self.state.step = int(state[f"{prefix}.step"][0])


# -- configuration -------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "absolute"
    batch_size: int = 16
    epochs_gan: int = 200
    epochs_l2: int = 200
    cadence: int = 3
    cadence_inverted: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    l2_coeff: float | None = None
    dropout_rate: float | None = None
    checkpoint_every: int = 10
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in ("absolute", "partial"):
            raise ValueError(f"mode must be 'absolute' or 'partial', got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.cadence < 1:
            raise ValueError("cadence must be at least 1")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    @property
    def effective_l2(self) -> float:
        if self.l2_coeff is not None:
            return self.l2_coeff
        return 1e-4 if self.mode == "partial" else 0.0

    @property
    def effective_dropout(self) -> float:
        if self.dropout_rate is not None:
            return self.dropout_rate
        return 0.3 if self.mode == "partial" else 0.0

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainResult:
    G: Module
    D: Module | None
    history: list[dict] = field(default_factory=list)
    d_steps: int = 0
    g_steps: int = 0
    checkpoints: list[str] = field(default_factory=list)
    trainer: object = None


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def _split_for_training(dataset) -> Subset:
    if isinstance(dataset, ChairDataset):
        return holdout_split(dataset)[0]
    return dataset


# -- adversarial training ------------------------------------------------------------

class GANTrainer:
    """Holds G, D and their optimizers; one ``train_step_d`` per batch, G every ``cadence`` batches."""

    def __init__(self, config: TrainConfig, dataset: ChairDataset | Subset):
        self.config = config
        self.data = _split_for_training(dataset)
        dtype = config.np_dtype
        mcfg = ModelConfig(**{**config.model.to_dict(), "n_classes": self.data.n_classes,
                              "image_size": self.data.image_size, "dropout": config.effective_dropout})
        self.model_config = mcfg
        rng = np.random.default_rng([config.seed, 0])
        if config.mode == "absolute":
            self.G = GeneratorAbs(mcfg, rng, dtype=dtype)
            self.D = Discriminator(mcfg, rng, image_channels=4, dtype=dtype)
        else:
            self.G = GeneratorPartial(mcfg, rng, dtype=dtype)
            self.D = Discriminator(mcfg, rng, info_dims=(mcfg.n_classes,), image_channels=3, dtype=dtype)
        self.opt_g = Adam(self.G, config.lr, config.beta1, config.beta2, config.eps)
        self.opt_d = Adam(self.D, config.lr, config.beta1, config.beta2, config.eps)
        self.sampler = NegativeSampler.from_dataset(self.data)
        self.epoch = 0
        self.d_steps = 0
        self.g_steps = 0
        self.batches_seen = 0
        self.history: list[dict] = []

    # images the discriminator sees for real samples
    def real_images(self, batch: Batch) -> np.ndarray:
        return batch.image if self.config.mode == "absolute" else batch.rgb

    def draw_z(self, n: int, rng: np.random.Generator):
        if self.config.mode == "absolute":
            return None
        return rng.standard_normal((n, self.model_config.z_dim)).astype(self.config.np_dtype)

    def d_losses(self, batch: Batch, negatives: ConditionTriple, z=None) -> dict[str, Tensor]:
        """Per-component discriminator losses from one batched forward pass.

        Rows for real, generated and each enabled negative group are stacked so
        D runs once; each component is the mean over its own rows.
        """
        w = self.config.weights.for_component()
        cond, n = batch.cond, len(batch)
        x = self.real_images(batch)
        with T.no_grad():
            fake = synthesize(self.G, cond, z).data
        groups = [("real", cond, x, None, 1.0), ("gen", cond, fake, None, 0.0)]
        if w["neg_c"] > 0:
            groups.append(("neg_c", cond.replace(c=negatives.c), x, None, 0.0))
        # the partially conditional D reads only the class, so view/transform negatives do not apply
        conditional_vt = len(self.D.info_dims) == 3
        if w["neg_v"] > 0 and conditional_vt:
            groups.append(("neg_v", cond.replace(v=negatives.v), x, ((cond.v - negatives.v) ** 2).sum(1), 0.0))
        if w["neg_t"] > 0 and conditional_vt:
            groups.append(("neg_t", cond.replace(t=negatives.t), x, ((cond.t - negatives.t) ** 2).sum(1), 0.0))
        stacked = ConditionTriple(*(np.concatenate([getattr(g[1], k) for g in groups]) for k in "cvt"))
        images = np.concatenate([g[2] for g in groups])
        scores = self.D(disc_infos(self.D, stacked), images)
        out = {}
        for i, (name, _, _, weight, target) in enumerate(groups):
            per = bce_per_sample(scores[i * n : (i + 1) * n], target)
            if weight is not None:
                per = per * weight.astype(per.dtype)
            out[name] = per.mean()
        return out

    def train_step_d(self, batch: Batch, negatives: ConditionTriple, z=None) -> dict[str, float]:
        comps = self.d_losses(batch, negatives, z)
        total = None
        weights = self.config.weights.for_component()
        for name, val in comps.items():
            term = val * weights[name]
            total = term if total is None else total + term
        reg = self.config.effective_l2
        if reg > 0:
            for p in self.opt_d.params:
                total = total + (p * p).sum() * reg
        grads = T.backward(total, self.opt_d.params)
        self.opt_d.step(grads)
        self.d_steps += 1
        metrics = {name: val.item() for name, val in comps.items()}
        metrics["total"] = total.item()
        return metrics

    def train_step_g(self, batch: Batch, z=None) -> dict[str, float]:
        loss = loss_g(self.D, self.G, batch.cond, z)
        grads = T.backward(loss, self.opt_g.params)
        self.opt_g.step(grads)
        self.g_steps += 1
        return {"g": loss.item()}

    def run_epoch(self) -> dict:
        cfg = self.config
        epoch = self.epoch + 1
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        self.D.set_rng(np.random.default_rng([cfg.seed, 2, epoch]))
        self.D.train()
        sums: dict[str, list[float]] = {}
        dtype = cfg.np_dtype
        for idx in _epoch_batches(len(self.data), cfg.batch_size, rng):
            batch = self.data.batch(idx, dtype)
            z = self.draw_z(len(batch), rng)
            self.batches_seen += 1
            on_cadence = self.batches_seen % cfg.cadence == 0
            if not cfg.cadence_inverted or on_cadence:
                negatives = self.sampler(batch.cond, rng)
                for k, v in self.train_step_d(batch, negatives, z).items():
                    sums.setdefault(k, []).append(v)
            if cfg.cadence_inverted:
                g_rounds = 1
            else:
                g_rounds = 1 if on_cadence else 0
            for _ in range(g_rounds):
                sums.setdefault("g", []).append(self.train_step_g(batch, self.draw_z(len(batch), rng))["g"])
        self.epoch = epoch
        row = {"epoch": epoch, "step": self.d_steps,
               "loss_g": float(np.mean(sums["g"])) if "g" in sums else None}
        for key, col in _METRIC_KEYS.items():
            row[col] = float(np.mean(sums[key])) if key in sums else None
        self.history.append(row)
        return row

    # -- persistence --
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"G.{k}": v for k, v in self.G.state_dict().items()}
        out.update({f"D.{k}": v for k, v in self.D.state_dict().items()})
        out.update(self.opt_g.state_dict("optG"))
        out.update(self.opt_d.state_dict("optD"))
        out["trainer.counters"] = np.array([self.epoch, self.d_steps, self.g_steps, self.batches_seen],
                                           dtype=np.float32)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.G.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("G.")})
        self.D.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("D.")})
        self.opt_g.load_state_dict(state, "optG")
        self.opt_d.load_state_dict(state, "optD")
        self.epoch, self.d_steps, self.g_steps, self.batches_seen = (int(x) for x in state["trainer.counters"])

    def save(self, path: str | os.PathLike) -> str:
        checkpoint_save(self.state_dict(), path)
        return str(path)


def write_metrics(rows: list[dict], path: str | os.PathLike, header: Sequence[str] = METRICS_HEADER) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["epoch"], row["step"]] + [_fmt(row.get(k)) for k in header[2:]])


def train_gan(config: TrainConfig, dataset: ChairDataset | Subset, out_dir: str | None = None,
              epochs: int | None = None, resume_from: str | None = None) -> TrainResult:
    """Alternate D and G updates for ``epochs`` (default ``config.epochs_gan``).

    With ``out_dir``, checkpoints go to ``ckpt_eNNNN.cgan`` every
    ``checkpoint_every`` epochs plus the final epoch, and the metrics log to
    ``metrics.csv``. A non-finite loss writes ``abort.cgan`` and re-raises.
    """
    trainer = GANTrainer(config, dataset)
    if resume_from:
        trainer.load_state_dict(checkpoint_load(resume_from))
        if out_dir and os.path.exists(os.path.join(out_dir, "metrics.csv")):
            trainer.history = _read_history(os.path.join(out_dir, "metrics.csv"), trainer.epoch)
    total = epochs if epochs is not None else config.epochs_gan
    result = TrainResult(trainer.G, trainer.D)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    while trainer.epoch < total:
        try:
            row = trainer.run_epoch()
        except T.NumericError:
            if out_dir:
                trainer.save(os.path.join(out_dir, "abort.cgan"))
            raise
        log.info("epoch %d: %s", row["epoch"], row)
        if out_dir and (trainer.epoch % config.checkpoint_every == 0 or trainer.epoch == total):
            result.checkpoints.append(trainer.save(os.path.join(out_dir, f"ckpt_e{trainer.epoch:04d}.cgan")))
        if out_dir:
            write_metrics(trainer.history, os.path.join(out_dir, "metrics.csv"))
    result.history = trainer.history
    result.d_steps, result.g_steps = trainer.d_steps, trainer.g_steps
    result.trainer = trainer
    return result


def _read_history(path: str, upto: int) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if int(rec["epoch"]) > upto:
                break
            row = {"epoch": int(rec["epoch"]), "step": int(rec["step"])}
            for k in METRICS_HEADER[2:]:
                row[k] = float(rec[k]) if rec[k] else None
            rows.append(row)
    return rows


# -- l2 baseline ---------------------------------------------------------------------

class L2Trainer:
    """Supervised regression of the absolutely conditional generator onto rendered targets."""

    def __init__(self, config: TrainConfig, dataset: ChairDataset | Subset):
        self.config = config
        self.data = _split_for_training(dataset)
        mcfg = ModelConfig(**{**config.model.to_dict(), "n_classes": self.data.n_classes,
                              "image_size": self.data.image_size})
        self.model_config = mcfg
        self.G = GeneratorAbs(mcfg, np.random.default_rng([config.seed, 0]), dtype=config.np_dtype)
        self.opt = Adam(self.G, config.lr, config.beta1, config.beta2, config.eps)
        self.epoch = 0
        self.steps = 0
        self.history: list[dict] = []

    def train_step(self, batch: Batch) -> float:
        rgb, mask = self.G(batch.cond)
        loss = l2_baseline_loss(rgb, mask, batch.rgb, batch.mask)
        self.opt.step(T.backward(loss, self.opt.params))
        self.steps += 1
        return loss.item()

    def run_epoch(self) -> dict:
        epoch = self.epoch + 1
        rng = np.random.default_rng([self.config.seed, 1, epoch])
        losses = [self.train_step(self.data.batch(idx, self.config.np_dtype))
                  for idx in _epoch_batches(len(self.data), self.config.batch_size, rng)]
        self.epoch = epoch
        row = {"epoch": epoch, "step": self.steps, "loss_l2": float(np.mean(losses))}
        self.history.append(row)
        return row

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"G.{k}": v for k, v in self.G.state_dict().items()}
        out.update(self.opt.state_dict("optG"))
        out["trainer.counters"] = np.array([self.epoch, self.steps], dtype=np.float32)
        return out

    def save(self, path: str | os.PathLike) -> str:
        checkpoint_save(self.state_dict(), path)
        return str(path)


def train_l2(config: TrainConfig, dataset: ChairDataset | Subset, out_dir: str | None = None,
             epochs: int | None = None) -> TrainResult:
    trainer = L2Trainer(config, dataset)
    total = epochs if epochs is not None else config.epochs_l2
    result = TrainResult(trainer.G, None)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    while trainer.epoch < total:
        try:
            row = trainer.run_epoch()
        except T.NumericError:
            if out_dir:
                trainer.save(os.path.join(out_dir, "abort.cgan"))
            raise
        log.info("l2 epoch %d: %s", row["epoch"], row)
        if out_dir and (trainer.epoch % config.checkpoint_every == 0 or trainer.epoch == total):
            result.checkpoints.append(trainer.save(os.path.join(out_dir, f"ckpt_e{trainer.epoch:04d}.cgan")))
        if out_dir:
            write_metrics(trainer.history, os.path.join(out_dir, "metrics.csv"), L2_METRICS_HEADER)
    result.history = trainer.history
    result.g_steps = trainer.steps
    result.trainer = trainer
    return result
