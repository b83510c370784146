"""Small end-to-end tour: train a reduced model, then write figure strips.

    python demos/quickstart.py [OUT_DIR]

Uses 4 classes, 12 azimuths and 16x16 images so it finishes in a couple of
minutes on one core. The strips it writes are PPM files.
"""

import os
import sys

from condgan import cli

# damped view/transform negatives: with the default 0.5 the discriminator needs
# far more steps than this short run has before it starts reading the conditions
SETTINGS = ["n_classes=4", "n_azimuths=12", "n_altitudes=1", "transforms_per_view=4", "image_size=16",
            "deconv_channels=32,16", "conv_channels=16,32", "checkpoint_every=50", "gamma_v=0.1", "gamma_t=0.1"]


def run(*args):
    print("$ condgan", " ".join(args))
    code = cli.main(list(args))
    if code:
        sys.exit(code)


def main(out: str = "quickstart_out") -> None:
    sets = [x for s in SETTINGS for x in ("--set", s)]
    gan, l2 = os.path.join(out, "gan"), os.path.join(out, "l2")
    run("train", "--mode", "gan-abs", "--epochs", "300", "--out", gan, *sets)
    run("train", "--mode", "l2", "--epochs", "300", "--out", l2, *sets)
    ckpt, base = os.path.join(gan, "ckpt_e0300.cgan"), os.path.join(l2, "ckpt_e0300.cgan")
    run("sample", "--checkpoint", ckpt, "--class", "1", "--azimuth", "45", "--out", os.path.join(out, "sample.ppm"))
    run("rotate", "--checkpoint", ckpt, "--class", "1", "--steps", "12", "--grid", "2x6",
        "--out", os.path.join(out, "rotate.ppm"))
    run("interpolate", "--checkpoint", ckpt, "--from", "0", "--to", "3", "--steps", "8",
        "--out", os.path.join(out, "interpolate.ppm"))
    run("eval", "--checkpoint", ckpt, "--l2-checkpoint", base, "--out", os.path.join(out, "eval.json"))


if __name__ == "__main__":
    main(*sys.argv[1:2])
