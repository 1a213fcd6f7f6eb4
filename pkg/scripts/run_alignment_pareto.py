#!/usr/bin/env python3
"""Preference-alignment track: all four algorithms x 3 seeds on the prompt
bandit, per-run CSVs plus the reward/reference-KL Pareto summary."""

import argparse
import pathlib
import sys

from rgpo.cli import main as rgpo_main

ALIGN_CONFIG = """\
iterations=400
learning_rate=0.5
beta_ref=0.5
"""


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/alignment")
    parser.add_argument("--seeds", default="0,1,2")
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "align.cfg"
    cfg.write_text(ALIGN_CONFIG)
    return rgpo_main(["align", "--config", str(cfg), "--seeds", args.seeds,
                      "--out", str(out)])


if __name__ == "__main__":
    sys.exit(main())
