#!/usr/bin/env python3
"""Run every numerical bound check and write one report CSV per check.
Exit code is nonzero if any bound fails."""

import argparse
import sys

from rgpo.cli import main as rgpo_main

CHECKS = ("bias", "variance", "heavy_tail", "improvement", "reinforce_limit")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/theory")
    parser.add_argument("--seed", default="0")
    args = parser.parse_args()

    code = 0
    for check in CHECKS:
        extra = []
        if check == "improvement":
            extra = ["--trials", "200"]
        elif check == "bias":
            extra = ["--trials", "100"]
        code |= rgpo_main(["theory", check, "--seed", args.seed,
                           "--out", args.out] + extra)
    return code


if __name__ == "__main__":
    sys.exit(main())
