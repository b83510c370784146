import os
import struct

import numpy as np
import pytest

from condgan import tensor as T
from condgan.data import ChairDataset
from condgan.layers import Module
from condgan.losses import LossWeights
from condgan.tensor import Tensor
from condgan.train import (
    METRICS_HEADER,
    Adam,
    AdamState,
    CheckpointError,
    GANTrainer,
    L2Trainer,
    TrainConfig,
    adam_step,
    checkpoint_load,
    checkpoint_save,
    train_gan,
    train_l2,
)

from test_models import TINY


def tiny_data():
    # 3 classes x 6 azimuths x 1 altitude x 2 transforms = 36; the train split has 18
    return ChairDataset(seed=1, n_classes=3, n_azimuths=6, n_altitudes=1, transforms_per_view=2, image_size=8)


def tiny_config(**kw):
    base = dict(batch_size=2, model=TINY, dtype="float64", checkpoint_every=1, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(module):
    return {n: p.data.copy() for n, p in module.named_parameters()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestAdam:
    def test_zero_gradient(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        adam_step([p], [np.zeros(2)], state)
        assert p.data.tolist() == [1.0, -2.0] and state.step == 1

    def test_first_step_is_sign(self):
        p = Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)
        adam_step([p], [np.array([3.0, -0.5, 1e-3])], AdamState.zeros_like([p]), lr=0.01)
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_converges_on_square(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState.zeros_like([x])
        for _ in range(100):
            adam_step([x], [2 * x.data], state, lr=0.1)
        assert abs(x.data[0]) < 0.05

    def test_nan_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(T.NumericError, match="layer.w"):
            adam_step([p], [np.array([np.nan, 0.0])], AdamState.zeros_like([p]), names=["layer.w"])


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.cadence, cfg.lr, cfg.beta1) == (16, 3, 2e-4, 0.5)
        assert cfg.effective_l2 == 0 and cfg.effective_dropout == 0

    def test_partial_regularization(self):
        cfg = TrainConfig(mode="partial")
        assert cfg.effective_l2 == 1e-4 and cfg.effective_dropout == 0.3

    def test_invalid(self):
        for bad in (dict(batch_size=1), dict(cadence=0), dict(mode="other")):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "scalar": np.float32(2.5).reshape(()),
                  "ünï": rng.standard_normal(5).astype(np.float32)}
        checkpoint_save(params, tmp_path / "x.cgan")
        back = checkpoint_load(tmp_path / "x.cgan")
        assert list(back) == list(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes() and back[k].shape == params[k].shape

    def test_layout(self, tmp_path):
        checkpoint_save({"ab": np.array([[1.0, 2.0]], dtype=np.float32)}, tmp_path / "x.cgan")
        raw = (tmp_path / "x.cgan").read_bytes()
        expect = b"CGAN" + struct.pack("<HI", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<B", 2)
        expect += struct.pack("<II", 1, 2) + struct.pack("<2f", 1.0, 2.0)
        assert raw == expect

    def test_corruption(self, tmp_path):
        path = tmp_path / "x.cgan"
        checkpoint_save({"w": np.ones((2, 2), dtype=np.float32)}, path)
        raw = path.read_bytes()
        path.write_bytes(b"XGAN" + raw[4:])
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_load(path)
        path.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(path)
        path.write_bytes(raw[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_load(path)
        path.write_bytes(raw + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            checkpoint_load(path)


class MeanD(Module):
    """Stub discriminator: sigmoid of the image mean."""

    info_dims = (3, 4, 3)
    image_channels = 4

    def __call__(self, cond, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return T.sigmoid(x.mean(axis=(1, 2, 3)).reshape(-1, 1) * 5.0)


class TestSteps:
    def setup_trainer(self, **kw):
        tr = GANTrainer(tiny_config(**kw), tiny_data())
        batch = tr.data.batch(np.arange(4))
        negs = tr.sampler(batch.cond, np.random.default_rng(0))
        return tr, batch, negs

    def test_d_step_leaves_g_untouched(self):
        tr, batch, negs = self.setup_trainer()
        before_g, before_d = snapshot(tr.G), snapshot(tr.D)
        tr.train_step_d(batch, negs)
        assert same(before_g, snapshot(tr.G))
        assert not same(before_d, snapshot(tr.D))

    def test_g_step_leaves_d_untouched(self):
        tr, batch, _ = self.setup_trainer()
        before_g, before_d = snapshot(tr.G), snapshot(tr.D)
        metrics = tr.train_step_g(batch)
        assert same(before_d, snapshot(tr.D))
        assert not same(before_g, snapshot(tr.G))
        assert metrics["g"] >= 0

    def test_zero_gammas_reduce_metrics(self):
        tr, batch, negs = self.setup_trainer(weights=LossWeights(1, 1, 0, 0, 0))
        assert set(tr.train_step_d(batch, negs)) == {"real", "gen", "total"}

    def test_d_step_lowers_total(self):
        tr, batch, negs = self.setup_trainer(lr=1e-3)

        def total():
            w = tr.config.weights.for_component()
            with T.no_grad():
                return sum(v.item() * w[k] for k, v in tr.d_losses(batch, negs).items())

        before = total()
        tr.train_step_d(batch, negs)
        assert total() < before

    def test_g_step_raises_stub_score(self):
        tr, batch, _ = self.setup_trainer(lr=1e-2)
        tr.D = MeanD()
        from condgan.losses import synthesize

        def score():
            with T.no_grad():
                return tr.D(None, synthesize(tr.G, batch.cond)).data.mean()

        before = score()
        tr.train_step_g(batch)
        assert score() > before

    def test_l2_regularization_in_partial_mode(self):
        tr, batch, negs = self.setup_trainer(mode="partial", l2_coeff=0.5)
        batch_rgb = tr.data.batch(np.arange(4))
        comps = tr.d_losses(batch_rgb, negs, tr.draw_z(4, np.random.default_rng(0)))
        assert set(comps) == {"real", "gen", "neg_c"}  # partial D sees only the class
        m = tr.train_step_d(batch_rgb, negs, tr.draw_z(4, np.random.default_rng(0)))
        assert m["total"] > sum(m[k] * w for k, w in tr.config.weights.for_component().items() if k in m)


class TestCadence:
    def test_counts(self):
        res = train_gan(tiny_config(cadence=3), tiny_data(), epochs=2)
        assert (res.d_steps, res.g_steps) == (18, 6)

    def test_cadence_one(self):
        res = train_gan(tiny_config(cadence=1), tiny_data(), epochs=1)
        assert res.d_steps == res.g_steps == 9

    def test_inverted(self):
        res = train_gan(tiny_config(cadence=3, cadence_inverted=True), tiny_data(), epochs=2)
        assert (res.d_steps, res.g_steps) == (6, 18)

    def test_partial_batch_dropped(self):
        res = train_gan(tiny_config(batch_size=4), tiny_data(), epochs=1)
        assert res.d_steps == 4


class TestTrainLoop:
    def test_artifacts_and_determinism(self, tmp_path):
        cfg = tiny_config(dtype="float32")
        a = train_gan(cfg, tiny_data(), str(tmp_path / "a"), epochs=2)
        b = train_gan(cfg, tiny_data(), str(tmp_path / "b"), epochs=2)
        assert [os.path.basename(p) for p in a.checkpoints] == ["ckpt_e0001.cgan", "ckpt_e0002.cgan"]
        for name in ("metrics.csv", "ckpt_e0001.cgan", "ckpt_e0002.cgan"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
        assert header == ",".join(METRICS_HEADER)

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_config(dtype="float32")
        full = train_gan(cfg, tiny_data(), str(tmp_path / "full"), epochs=3)
        train_gan(cfg, tiny_data(), str(tmp_path / "part"), epochs=1)
        resumed = train_gan(cfg, tiny_data(), str(tmp_path / "part"), epochs=3,
                            resume_from=str(tmp_path / "part" / "ckpt_e0001.cgan"))
        assert resumed.history == full.history
        assert (tmp_path / "full" / "ckpt_e0003.cgan").read_bytes() == \
            (tmp_path / "part" / "ckpt_e0003.cgan").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_checkpoint(self, tmp_path):
        with pytest.raises(T.NumericError):
            train_gan(tiny_config(lr=float("inf")), tiny_data(), str(tmp_path), epochs=2)
        assert (tmp_path / "abort.cgan").exists()

    def test_partial_mode_runs(self):
        res = train_gan(tiny_config(mode="partial"), tiny_data(), epochs=1)
        assert res.d_steps == 9 and np.isfinite(res.history[0]["loss_d_total"])


class TestL2:
    def test_loss_decreases(self):
        res = train_l2(tiny_config(lr=2e-3), tiny_data(), epochs=15)
        assert res.history[-1]["loss_l2"] < res.history[0]["loss_l2"]

    def test_deterministic(self, tmp_path):
        cfg = tiny_config(dtype="float32")
        train_l2(cfg, tiny_data(), str(tmp_path / "a"), epochs=2)
        train_l2(cfg, tiny_data(), str(tmp_path / "b"), epochs=2)
        for name in ("metrics.csv", "ckpt_e0002.cgan"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_perfect_target_fixture(self):
        # zero head weights plus matching biases make G emit the constant target exactly
        tr = L2Trainer(tiny_config(), tiny_data())
        for head, value in ((tr.G.rgb_head, np.arctanh(0.3)), (tr.G.mask_head, 0.0)):
            head.w.data[:] = 0
            head.b.data[:] = value
        batch = tr.data.batch(np.arange(2))
        batch.rgb[:] = 0.3
        batch.mask[:] = 0.5
        assert tr.train_step(batch) < 1e-12
