#!/usr/bin/env python3
"""Point-mass comparison: gated surrogate vs PPO vs AWR vs pure IS, 3 seeds
each, with per-seed metrics CSVs and a summary table per algorithm."""

import argparse
import sys

from rgpo.cli import main as rgpo_main

ALGORITHMS = ("rgpo", "ppo", "awr", "identity_is")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/pointmass")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--iterations", default="200")
    args = parser.parse_args()

    config_lines = [
        "optimizer=adam",
        "learning_rate=2.5e-3",
        f"total_iterations={args.iterations}",
    ]
    code = 0
    for algorithm in ALGORITHMS:
        cfg_path = f"{args.out}/{algorithm}.cfg"
        import pathlib
        pathlib.Path(args.out).mkdir(parents=True, exist_ok=True)
        pathlib.Path(cfg_path).write_text("\n".join(config_lines) + "\n")
        code |= rgpo_main(["train", "--config", cfg_path,
                           "--algorithm", algorithm,
                           "--seeds", args.seeds,
                           "--out", f"{args.out}/{algorithm}"])
    return code


if __name__ == "__main__":
    sys.exit(main())
