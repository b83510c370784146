import json

import numpy as np
import pytest

from condgan import cli
from condgan.data import read_ppm

TINY_RUN = {
    "n_classes": 3, "n_azimuths": 6, "n_altitudes": 1, "image_size": 8, "batch_size": 2, "checkpoint_every": 1,
    "model": {"encoder_width": 6, "encoder_layers": 1, "fused_width": 8, "deconv_channels": [4, 3],
              "conv_channels": [3, 4], "hidden_dim": 8, "head_width": 6, "z_dim": 3, "z_channels": 2},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_RUN))
    assert cli.main(["train", "--config", str(cfg), "--epochs", "2", "--seed", "3", "--out", str(root / "gan")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--mode", "l2", "--epochs", "2", "--out", str(root / "l2")]) == 0
    return root


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"lr": 1e-3, "cadence": 5, "model": {"hidden_dim": 32}}))
        cfg = cli.load_run_config(str(path), ["cadence=2", "gamma_v=0", "head_width=7"], seed=9)
        assert (cfg.lr, cfg.cadence, cfg.gamma_v, cfg.seed) == (1e-3, 2, 0.0, 9)
        tc = cfg.train_config()
        assert tc.model.hidden_dim == 32 and tc.model.head_width == 7 and tc.weights.gamma_v == 0

    def test_types(self):
        cfg = cli.load_run_config(None, ["cadence_inverted=true", "deconv_channels=8,4,2", "l2_coeff=0.01"])
        assert cfg.cadence_inverted is True and cfg.l2_coeff == 0.01
        assert cfg.train_config().model.deconv_channels == (8, 4, 2)

    def test_rejects_unknown(self):
        with pytest.raises(KeyError):
            cli.load_run_config(None, ["nonsense=1"])
        with pytest.raises(KeyError):
            cli.load_run_config(None, ["n_classes_typo=3"])
        with pytest.raises(ValueError):
            cli.load_run_config(None, ["mode=other"])
        with pytest.raises(ValueError):
            cli.load_run_config(None, ["lr"])

    def test_derived_model_keys_are_not_settable(self):
        with pytest.raises(KeyError):
            cli.load_run_config(None, ["model.dropout=0.5"])

    def test_mode_mapping(self):
        assert cli.load_run_config(None, ["mode=gan-partial"]).train_config().mode == "partial"
        assert cli.load_run_config(None, ["mode=gan-abs"]).train_config().mode == "absolute"

    def test_bad_key_exit_code(self, capsys):
        assert cli.main(["train", "--set", "bogus=1"]) == 2
        assert "bogus" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, run_dir):
        gan = run_dir / "gan"
        assert {"config.json", "metrics.csv", "ckpt_e0001.cgan", "ckpt_e0002.cgan"} <= {p.name for p in gan.iterdir()}
        echoed = json.loads((gan / "config.json").read_text())
        assert echoed["seed"] == 3 and echoed["mode"] == "gan-abs" and echoed["model"]["hidden_dim"] == 8
        assert json.loads((run_dir / "l2" / "config.json").read_text())["mode"] == "l2"

    def test_dataset_export(self, tmp_path, run_dir):
        assert cli.main(["dataset", "--config", str(run_dir / "tiny.json"), "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("*.ppm"))) == 36 and (tmp_path / "manifest.csv").exists()


class TestSampling:
    def ckpt(self, run_dir):
        return str(run_dir / "gan" / "ckpt_e0002.cgan")

    def test_sample_writes_rgb_and_mask(self, run_dir, tmp_path):
        out = tmp_path / "s.ppm"
        assert cli.main(["sample", "--checkpoint", self.ckpt(run_dir), "--class", "1", "--azimuth", "40",
                         "--transform", "0.1,0,0", "--out", str(out)]) == 0
        assert read_ppm(out).shape == (8, 8, 3)
        assert read_ppm(tmp_path / "s_mask.ppm").shape == (8, 8, 3)

    def test_interpolate_endpoints_match_sample(self, run_dir, tmp_path):
        ck = self.ckpt(run_dir)
        common = ["--azimuth", "60", "--altitude", "15"]
        for k in (0, 2):
            cli.main(["sample", "--checkpoint", ck, "--class", str(k), *common, "--out", str(tmp_path / f"c{k}.ppm")])
        cli.main(["interpolate", "--checkpoint", ck, "--from", "0", "--to", "2", "--steps", "5", *common,
                  "--out", str(tmp_path / "i.ppm")])
        strip = read_ppm(tmp_path / "i.ppm")
        assert strip.shape == (8, 40, 3)
        assert np.array_equal(strip[:, :8], read_ppm(tmp_path / "c0.ppm"))
        assert np.array_equal(strip[:, -8:], read_ppm(tmp_path / "c2.ppm"))

    def test_rotate_layouts(self, run_dir, tmp_path):
        ck = self.ckpt(run_dir)
        cli.main(["rotate", "--checkpoint", ck, "--class", "0", "--steps", "6", "--out", str(tmp_path / "a.ppm")])
        cli.main(["rotate", "--checkpoint", ck, "--class", "0", "--steps", "6", "--grid", "2x3",
                  "--out", str(tmp_path / "b.ppm")])
        strip, grid = read_ppm(tmp_path / "a.ppm"), read_ppm(tmp_path / "b.ppm")
        assert strip.shape == (8, 48, 3) and grid.shape == (16, 24, 3)
        assert np.array_equal(grid[8:, :], strip[:, 24:])

    def test_rotate_first_frame_is_azimuth_zero(self, run_dir, tmp_path):
        ck = self.ckpt(run_dir)
        cli.main(["rotate", "--checkpoint", ck, "--class", "1", "--steps", "4", "--out", str(tmp_path / "r.ppm")])
        cli.main(["sample", "--checkpoint", ck, "--class", "1", "--azimuth", "0", "--out", str(tmp_path / "s.ppm")])
        assert np.array_equal(read_ppm(tmp_path / "r.ppm")[:, :8], read_ppm(tmp_path / "s.ppm"))

    def test_bad_grid_and_class(self, run_dir, tmp_path):
        ck = self.ckpt(run_dir)
        assert cli.main(["rotate", "--checkpoint", ck, "--class", "0", "--steps", "6", "--grid", "4x4",
                         "--out", str(tmp_path / "x.ppm")]) == 2
        assert cli.main(["sample", "--checkpoint", ck, "--class", "7", "--out", str(tmp_path / "x.ppm")]) == 2

    def test_partial_mode_sample(self, run_dir, tmp_path):
        out = tmp_path / "p"
        assert cli.main(["train", "--config", str(run_dir / "tiny.json"), "--mode", "gan-partial", "--epochs", "1",
                         "--out", str(out)]) == 0
        ck = str(out / "ckpt_e0001.cgan")
        for seed in (0, 1):
            cli.main(["sample", "--checkpoint", ck, "--class", "0", "--z-seed", str(seed),
                      "--out", str(tmp_path / f"z{seed}.ppm")])
        assert not (tmp_path / "z0_mask.ppm").exists()
        assert not np.array_equal(read_ppm(tmp_path / "z0.ppm"), read_ppm(tmp_path / "z1.ppm"))


class TestEval:
    def test_report(self, run_dir, tmp_path):
        out = tmp_path / "e.json"
        assert cli.main(["eval", "--checkpoint", str(run_dir / "gan" / "ckpt_e0002.cgan"),
                         "--l2-checkpoint", str(run_dir / "l2" / "ckpt_e0002.cgan"), "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        for key in ("masked_l2_train", "masked_l2_heldout", "sharpness", "discriminator_heldout", "baseline"):
            assert key in rep
        assert set(rep["discriminator_heldout"]) == {"matched", "mismatched", "balanced"}
        assert rep["baseline"]["sharpness"] >= 0

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.cgan")]) == 2


class TestGradcheck:
    def test_op_group_passes(self, capsys):
        assert cli.main(["gradcheck", "--groups", "op"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_injected_bug_fails(self, capsys):
        assert cli.main(["gradcheck", "--groups", "op", "--inject-bug"]) == 1
        assert "FAIL  op     tanh" in capsys.readouterr().out
