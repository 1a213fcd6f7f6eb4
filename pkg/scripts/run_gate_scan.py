#!/usr/bin/env python3
"""Gate/weight curves for all five gate kinds plus effective-weight
histograms under the log-normal ratio model at three training stages."""

import argparse
import sys

from rgpo.cli import main as rgpo_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/gatescan")
    parser.add_argument("--n-samples", default="100000")
    args = parser.parse_args()
    return rgpo_main(["gatescan", "--out", args.out,
                      "--n-samples", args.n_samples,
                      "--sigmas", "0.35,0.15,0.08"])


if __name__ == "__main__":
    sys.exit(main())
