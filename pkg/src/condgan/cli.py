"""``condgan`` command line: dataset export, training, sampling, figure strips, checks.

Every command accepts ``--config PATH`` (flat JSON), repeated ``--set key=value``
overrides, ``--seed`` and ``--out``. The effective configuration is written
next to the outputs as ``config.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import evaluate as E
from . import tensor as T
from .data import ChairDataset, ConditionTriple, encode_view, export_dataset, holdout_split, to_uint8, write_ppm
from .gradsuite import injected_bug, run_suite
from .losses import LossWeights
from .models import Discriminator, GeneratorAbs, GeneratorPartial, ModelConfig
from .train import TrainConfig, checkpoint_load, train_gan, train_l2

__all__ = ["RunConfig", "main", "load_run_config", "load_models"]

log = logging.getLogger("condgan")

MODES = ("gan-abs", "gan-partial", "l2")
# model fields the dataset or mode decides; not settable directly
_DERIVED_MODEL_KEYS = {"n_classes", "image_size", "dropout"}
_WEIGHT_KEYS = [f.name for f in fields(LossWeights)]
_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in _DERIVED_MODEL_KEYS]


@dataclass
class RunConfig:
    """Everything a command needs, as one flat namespace."""

    mode: str = "gan-abs"
    seed: int = 0
    # dataset
    dataset_seed: int = 0
    n_classes: int = 10
    n_azimuths: int = 36
    n_altitudes: int = 3
    transforms_per_view: int = 2
    image_size: int = 32
    # training
    batch_size: int = 16
    epochs_gan: int = 200
    epochs_l2: int = 200
    cadence: int = 3
    cadence_inverted: bool = False
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    l2_coeff: float | None = None
    dropout_rate: float | None = None
    checkpoint_every: int = 10
    dtype: str = "float32"
    # loss weights
    alpha: float = 1.0
    beta: float = 1.0
    gamma_c: float = 1.0
    gamma_v: float = 0.5
    gamma_t: float = 0.5
    # model widths
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        unknown = set(self.model) - set(_MODEL_KEYS)
        if unknown:
            raise KeyError(f"unknown model keys {sorted(unknown)}")

    def dataset(self) -> ChairDataset:
        return ChairDataset(seed=self.dataset_seed, n_classes=self.n_classes, n_azimuths=self.n_azimuths,
                            n_altitudes=self.n_altitudes, transforms_per_view=self.transforms_per_view,
                            image_size=self.image_size)

    def train_config(self) -> TrainConfig:
        weights = LossWeights(**{k: getattr(self, k) for k in _WEIGHT_KEYS})
        model = ModelConfig(**{**self.model, "n_classes": self.n_classes, "image_size": self.image_size})
        return TrainConfig(
            mode="partial" if self.mode == "gan-partial" else "absolute",
            batch_size=self.batch_size, epochs_gan=self.epochs_gan, epochs_l2=self.epochs_l2,
            cadence=self.cadence, cadence_inverted=self.cadence_inverted, weights=weights, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, seed=self.seed, l2_coeff=self.l2_coeff,
            dropout_rate=self.dropout_rate, checkpoint_every=self.checkpoint_every, dtype=self.dtype,
            model=model,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(key: str, raw, default):
    """Convert an override to the type of the field's default."""
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            pass
    if default is None or raw is None:
        return raw
    if isinstance(default, bool):
        if isinstance(raw, str):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return bool(raw)
    if isinstance(default, (list, tuple)):
        return list(raw) if isinstance(raw, (list, tuple)) else [int(x) for x in str(raw).split(",")]
    return type(default)(raw)


def load_run_config(path: str | None = None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides, then ``seed``.

    Model widths may be given flat (``hidden_dim=64``) or as ``model.hidden_dim``.
    """
    defaults = RunConfig()
    top = {f.name: getattr(defaults, f.name) for f in fields(RunConfig) if f.name != "model"}
    model_defaults = ModelConfig().to_dict()
    values: dict = {}
    model: dict = {}

    def put(key: str, raw):
        if key.startswith("model."):
            key = key[6:]
            if key not in _MODEL_KEYS:
                raise KeyError(f"unknown config key 'model.{key}'")
        if key in top:
            values[key] = _coerce(key, raw, top[key])
        elif key in _MODEL_KEYS:
            model[key] = _coerce(key, raw, model_defaults[key])
        else:
            raise KeyError(f"unknown config key {key!r}")

    if path:
        with open(path) as fh:
            data = json.load(fh)
        for key, val in data.items():
            if key == "model":
                for mk, mv in val.items():
                    put(f"model.{mk}", mv)
            else:
                put(key, val)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        put(key.strip(), raw)
    if seed is not None:
        values["seed"] = seed
    return RunConfig(**values, model=model)


def write_config(cfg: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# -- model loading ------------------------------------------------------------------

def _model_config(cfg: RunConfig) -> ModelConfig:
    return cfg.train_config().model


def load_models(checkpoint: str, cfg: RunConfig):
    """(G, D or None) with weights from ``checkpoint``, built at 32-bit like training."""
    state = checkpoint_load(checkpoint)
    mcfg = _model_config(cfg)
    rng = np.random.default_rng(0)
    if cfg.mode == "gan-partial":
        G = GeneratorPartial(mcfg, rng, dtype=np.float32)
    else:
        G = GeneratorAbs(mcfg, rng, dtype=np.float32)
    G.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("G.")})
    D = None
    if any(k.startswith("D.") for k in state):
        if cfg.mode == "gan-partial":
            D = Discriminator(mcfg, rng, info_dims=(mcfg.n_classes,), image_channels=3, dtype=np.float32)
        else:
            D = Discriminator(mcfg, rng, dtype=np.float32)
        D.load_state_dict({k[2:]: v for k, v in state.items() if k.startswith("D.")})
        D.eval()
    G.eval()
    return G, D


def _config_for_checkpoint(args) -> RunConfig:
    """Use --config if given, else the config.json next to the checkpoint."""
    path = args.config
    if path is None:
        guess = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.json")
        path = guess if os.path.exists(guess) else None
    return load_run_config(path, args.set or (), args.seed)


# -- frame rendering ------------------------------------------------------------------

def frame(G, cfg: RunConfig, c_vec, az: float, alt: float, t=(0.0, 0.0, 0.0), z_seed: int = 0):
    """One generated image (rgb, mask or None), always evaluated as a batch of one.

    Every command goes through here, so a frame produced by ``interpolate``
    is bit-identical to the ``sample`` frame with the same condition.
    """
    c = np.asarray(c_vec, dtype=np.float32).reshape(1, -1)
    with T.no_grad():
        if isinstance(G, GeneratorPartial):
            z = np.random.default_rng(z_seed).standard_normal((1, G.config.z_dim)).astype(np.float32)
            return G(z, c).data[0], None
        cond = ConditionTriple(c, encode_view([az], [alt]).astype(np.float32),
                               np.asarray(t, dtype=np.float32).reshape(1, 3))
        rgb, mask = G(cond)
    return rgb.data[0], mask.data[0]


def _mask_to_signed(mask):
    return mask * 2.0 - 1.0


def tile(frames, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Lay C x H x W frames out as one strip, or as a ROWS x COLS grid."""
    n = len(frames)
    rows, cols = grid if grid else (1, n)
    if rows * cols != n:
        raise ValueError(f"grid {rows}x{cols} does not hold {n} frames")
    row_imgs = [np.concatenate(frames[r * cols:(r + 1) * cols], axis=2) for r in range(rows)]
    return np.concatenate(row_imgs, axis=1)


def _parse_grid(text: str | None):
    if not text:
        return None
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like ROWSxCOLS, got {text!r}") from None


def _one_hot(k: int, n: int) -> np.ndarray:
    if not 0 <= k < n:
        raise ValueError(f"class id {k} out of range for {n} classes")
    out = np.zeros(n)
    out[k] = 1.0
    return out


def _ppm_path(path: str, suffix: str = "") -> str:
    root, ext = os.path.splitext(path)
    return f"{root}{suffix}{ext or '.ppm'}"


def _save(path: str, img) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    write_ppm(path, to_uint8(img))
    return path


# -- commands ----------------------------------------------------------------------------

def cmd_dataset(args) -> int:
    cfg = load_run_config(args.config, args.set or (), args.seed)
    out = args.out or "dataset"
    write_config(cfg, out)
    manifest = export_dataset(cfg.dataset(), out)
    print(f"wrote {len(cfg.dataset())} images and {manifest}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set or ())
    if args.mode:
        overrides.append(f"mode={args.mode}")
    cfg = load_run_config(args.config, overrides, args.seed)
    out = args.out or "run"
    write_config(cfg, out)
    tcfg, ds = cfg.train_config(), cfg.dataset()
    if cfg.mode == "l2":
        res = train_l2(tcfg, ds, out, epochs=args.epochs)
    else:
        res = train_gan(tcfg, ds, out, epochs=args.epochs, resume_from=args.resume)
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} epochs; last metrics {last}")
    print(f"checkpoints: {', '.join(res.checkpoints)}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config_for_checkpoint(args)
    G, _ = load_models(args.checkpoint, cfg)
    c = _one_hot(args.cls, cfg.n_classes)
    rgb, mask = frame(G, cfg, c, math.radians(args.azimuth), math.radians(args.altitude),
                      _parse_t(args.transform), args.z_seed)
    out = args.out or "sample.ppm"
    _save(_ppm_path(out), rgb)
    print(f"wrote {_ppm_path(out)}")
    if mask is not None:
        _save(_ppm_path(out, "_mask"), _mask_to_signed(mask))
        print(f"wrote {_ppm_path(out, '_mask')}")
    return 0


def _parse_t(text: str | None):
    if not text:
        return (0.0, 0.0, 0.0)
    vals = [float(x) for x in text.split(",")]
    if len(vals) != 3:
        raise ValueError("--transform expects dx,dy,log_scale")
    return tuple(vals)


def rotation_azimuths(n_steps: int) -> np.ndarray:
    if n_steps < 2:
        raise ValueError("need at least 2 steps")
    return np.arange(n_steps) * (2 * math.pi / n_steps)


def cmd_rotate(args) -> int:
    cfg = _config_for_checkpoint(args)
    G, _ = load_models(args.checkpoint, cfg)
    c = _one_hot(args.cls, cfg.n_classes)
    frames = [frame(G, cfg, c, az, math.radians(args.altitude), z_seed=args.z_seed)[0]
              for az in rotation_azimuths(args.steps)]
    out = _ppm_path(args.out or "rotate.ppm")
    _save(out, tile(frames, args.grid))
    print(f"wrote {out} ({args.steps} azimuths)")
    return 0


def interpolation_weights(n_steps: int) -> np.ndarray:
    if n_steps < 2:
        raise ValueError("need at least 2 steps")
    return np.linspace(0.0, 1.0, n_steps)


def cmd_interpolate(args) -> int:
    cfg = _config_for_checkpoint(args)
    if args.cls_from == args.cls_to:
        raise ValueError("interpolation needs two different classes")
    G, _ = load_models(args.checkpoint, cfg)
    a, b = _one_hot(args.cls_from, cfg.n_classes), _one_hot(args.cls_to, cfg.n_classes)
    az, alt = math.radians(args.azimuth), math.radians(args.altitude)
    frames = []
    for lam in interpolation_weights(args.steps):
        # endpoints use the pure one-hots so they match `sample` exactly
        c = a if lam == 0.0 else b if lam == 1.0 else lam * b + (1.0 - lam) * a
        frames.append(frame(G, cfg, c, az, alt, z_seed=args.z_seed)[0])
    out = _ppm_path(args.out or "interpolate.ppm")
    _save(out, tile(frames, args.grid))
    print(f"wrote {out} ({args.steps} steps)")
    return 0


def cmd_gradcheck(args) -> int:
    groups = tuple(args.groups.split(",")) if args.groups else ("op", "layer", "model")
    if args.inject_bug:
        with injected_bug():
            results = run_suite(seed=args.seed or 0, groups=groups, report=print)
    else:
        results = run_suite(seed=args.seed or 0, groups=groups, report=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def evaluate_run(cfg: RunConfig, gan_checkpoint: str, l2_checkpoint: str | None = None) -> dict:
    """Masked L2 on train and held-out views, D accuracy, and sharpness, as a dict."""
    ds = cfg.dataset()
    train, test = holdout_split(ds)
    G, D = load_models(gan_checkpoint, cfg)
    report: dict = {"checkpoint": gan_checkpoint}
    if isinstance(G, GeneratorAbs):
        pred_tr, rgb_tr, mask_tr = E.generate(G, train)
        pred_te, rgb_te, mask_te = E.generate(G, test)
        report["masked_l2_train"] = E.masked_l2(pred_tr, rgb_tr, mask_tr)
        report["masked_l2_heldout"] = E.masked_l2(pred_te, rgb_te, mask_te)
        report["sharpness"] = E.sharpness(pred_te)
        report["sharpness_ground_truth"] = E.sharpness(rgb_te)
    if D is not None:
        report["discriminator_heldout"] = dict(E.discriminator_accuracy(D, test, seed=cfg.seed))
    if l2_checkpoint:
        base_cfg = dataclasses.replace(cfg, mode="l2")
        G2, _ = load_models(l2_checkpoint, base_cfg)
        pred2, rgb2, mask2 = E.generate(G2, test)
        report["baseline"] = {"checkpoint": l2_checkpoint, "masked_l2_heldout": E.masked_l2(pred2, rgb2, mask2),
                              "sharpness": E.sharpness(pred2)}
    return report


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args)
    for path in filter(None, (args.checkpoint, args.l2_checkpoint)):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint {path}")
    report = evaluate_run(cfg, args.checkpoint, args.l2_checkpoint)
    out = args.out or "eval.json"
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# -- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat keys)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="training/sampling seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="condgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("dataset", parents=[common], help="render and export the dataset")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", parents=[common], help="train a GAN or the l2 baseline")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--epochs", type=int, help="stop after this many epochs (default: config)")
    s.add_argument("--resume", help="checkpoint to resume from (GAN modes)")
    s.set_defaults(func=cmd_train)

    def with_checkpoint(name, helptext, func):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--z-seed", type=int, default=0, help="noise seed for the partial generator")
        s.set_defaults(func=func)
        return s

    s = with_checkpoint("sample", "generate one image (and its mask)", cmd_sample)
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--azimuth", type=float, default=0.0, help="degrees")
    s.add_argument("--altitude", type=float, default=20.0, help="degrees")
    s.add_argument("--transform", help="dx,dy,log_scale")

    s = with_checkpoint("rotate", "strip of equally spaced azimuths", cmd_rotate)
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--steps", type=int, default=36)
    s.add_argument("--altitude", type=float, default=20.0, help="degrees")
    s.add_argument("--grid", type=_parse_grid, help="ROWSxCOLS layout instead of one strip")

    s = with_checkpoint("interpolate", "strip blending two class vectors", cmd_interpolate)
    s.add_argument("--from", dest="cls_from", type=int, required=True)
    s.add_argument("--to", dest="cls_to", type=int, required=True)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--azimuth", type=float, default=0.0, help="degrees")
    s.add_argument("--altitude", type=float, default=20.0, help="degrees")
    s.add_argument("--grid", type=_parse_grid)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--inject-bug", action="store_true", help="negative control: break tanh's gradient")
    s.add_argument("--groups", help="comma list of op,layer,model")
    s.set_defaults(func=cmd_gradcheck)

    s = with_checkpoint("eval", "metrics report for a trained checkpoint", cmd_eval)
    s.add_argument("--l2-checkpoint", help="baseline checkpoint to compare against")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"condgan {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
