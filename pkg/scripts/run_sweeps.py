#!/usr/bin/env python3
"""Hyperparameter sweeps: sigmoid sharpness k in {2,5,10,20} and the initial
penalty coefficient beta0 in {0.2,0.5,1.0}."""

import argparse
import pathlib
import sys

from rgpo.cli import main as rgpo_main

BASE_CONFIG = """\
optimizer=adam
learning_rate=2.5e-3
total_iterations=100
"""


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/sweeps")
    parser.add_argument("--seeds", default="0")
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "base.cfg"
    cfg.write_text(BASE_CONFIG)
    code = rgpo_main(["sweep", "--param", "gate.k", "--values", "2,5,10,20",
                      "--config", str(cfg), "--seeds", args.seeds,
                      "--out", str(out / "k_sweep")])
    code |= rgpo_main(["sweep", "--param", "beta0", "--values", "0.2,0.5,1.0",
                       "--config", str(cfg), "--seeds", args.seeds,
                       "--out", str(out / "beta0_sweep")])
    return code


if __name__ == "__main__":
    sys.exit(main())
