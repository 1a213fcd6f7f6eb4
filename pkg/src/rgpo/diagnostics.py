"""Per-iteration training diagnostics: normalized ESS, gradient variance,
and the metrics CSV.

The CSV header is part of the external contract:
iteration,mean_return,mean_kl,max_kl,spike,ess,grad_variance,beta,wall_seconds
with spike encoded as 0/1 and floats written with full round-trip precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CSV_HEADER = ["iteration", "mean_return", "mean_kl", "max_kl", "spike",
              "ess", "grad_variance", "beta", "wall_seconds"]


@dataclass
class IterationMetrics:
    iteration: int
    mean_return: float
    mean_kl: float
    max_kl: float
    spike: bool
    ess: float
    grad_variance: float
    beta: float
    wall_seconds: float


def ess(weights) -> float:
    """Normalized effective sample size (sum w)^2 / (N * sum w^2), in (0, 1].

    Equals 1 iff all weights are equal; scale invariant.  All-zero weights are
    a degenerate batch and raise.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size < 1:
        raise ValueError("need at least one weight")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    denom = w.size * np.sum(w * w)
    if denom == 0.0:
        raise ValueError("all-zero weights: degenerate batch")
    return float(np.sum(w) ** 2 / denom)


def grad_variance(minibatch_gradients: Sequence[np.ndarray]) -> float:
    """Mean over coordinates of the across-minibatch per-coordinate variance
    (unbiased, N-1 denominator).  Needs at least two gradients."""
    if len(minibatch_gradients) < 2:
        raise ValueError("need at least 2 gradients")
    stacked = np.stack([np.asarray(g, dtype=np.float64).ravel()
                        for g in minibatch_gradients])
    if stacked.ndim != 2:
        raise ValueError("gradients must be flat vectors of equal length")
    return float(stacked.var(axis=0, ddof=1).mean())


def write_metrics(path, metrics: Sequence[IterationMetrics]) -> None:
    """Write the diagnostics CSV; floats use repr for lossless round-trips."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for m in metrics:
            writer.writerow([m.iteration, repr(m.mean_return), repr(m.mean_kl),
                             repr(m.max_kl), int(m.spike), repr(m.ess),
                             repr(m.grad_variance), repr(m.beta), repr(m.wall_seconds)])


def read_metrics(path) -> list[IterationMetrics]:
    """Parse a diagnostics CSV written by write_metrics."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected metrics header: {header}")
        for row in reader:
            out.append(IterationMetrics(
                iteration=int(row[0]), mean_return=float(row[1]),
                mean_kl=float(row[2]), max_kl=float(row[3]),
                spike=bool(int(row[4])), ess=float(row[5]),
                grad_variance=float(row[6]), beta=float(row[7]),
                wall_seconds=float(row[8])))
    return out
