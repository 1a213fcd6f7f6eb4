"""Acceptance gates g(r) over importance ratios and their effective weights.

Every gate maps the nonnegative ratio r = pi_new/pi_old to an acceptance
value; the effective gradient weight is w(r) = g'(r) * r, the scalar that
multiplies grad(log pi) * A in the gated policy gradient.  The bank covers
the smooth gates (sigmoid, temperature), the truncated-IS gate
(clipped_linear), and the two baseline correspondences (identity_is for the
pure IS surrogate, ppo_clip for the clipped surrogate's weight profile).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import diffcore as dc

GATE_KINDS = ("sigmoid", "clipped_linear", "temperature", "identity_is", "ppo_clip")

# ln r is clamped here before the temperature gate so g(0) = 0 by continuity
_LOG_R_FLOOR = -700.0


@dataclass(frozen=True)
class GateSpec:
    """Which gate family to use plus its parameters.

    Only the parameter belonging to ``kind`` is read: k (sigmoid sharpness),
    c (clipped_linear cap), beta_temp (temperature exponent), eps_clip
    (ppo_clip radius).
    """

    kind: str = "sigmoid"
    k: float = 5.0
    c: float = 2.0
    beta_temp: float = 1.0
    eps_clip: float = 0.2

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}; choose from {GATE_KINDS}")
        if self.kind == "sigmoid" and not self.k > 0:
            raise ValueError("sigmoid sharpness k must be positive")
        if self.kind == "clipped_linear" and not self.c > 0:
            raise ValueError("clipped_linear cap c must be positive")
        if self.kind == "temperature" and not self.beta_temp > 0:
            raise ValueError("temperature exponent beta_temp must be positive")
        if self.kind == "ppo_clip" and not 0 < self.eps_clip < 1:
            raise ValueError("ppo_clip radius eps_clip must lie in (0, 1)")


def _check_ratio(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("ratios must be nonnegative")
    return r


def gate_value(spec: GateSpec, r) -> np.ndarray | float:
    """g(r); vectorized over r, monotone non-decreasing for every kind."""
    arr = _check_ratio(r)
    if spec.kind == "sigmoid":
        out = expit(spec.k * (arr - 1.0))
    elif spec.kind == "clipped_linear":
        out = np.clip(arr, 0.0, spec.c)
    elif spec.kind == "temperature":
        with np.errstate(divide="ignore"):
            log_r = np.maximum(np.log(arr), _LOG_R_FLOOR)
        out = expit(spec.beta_temp * log_r)
    elif spec.kind == "identity_is":
        out = arr.copy()
    else:  # ppo_clip
        out = np.clip(arr, 1.0 - spec.eps_clip, 1.0 + spec.eps_clip)
    return float(out) if np.isscalar(r) or np.ndim(r) == 0 else out


def gate_weight(spec: GateSpec, r) -> np.ndarray | float:
    """Effective weight w(r) = g'(r) * r.

    At the clip/cap kinks (r = c, r = 1 +- eps) the weight takes the
    outside-branch value 0, matching the clip subgradient convention.
    """
    arr = _check_ratio(r)
    if spec.kind == "sigmoid":
        s = expit(spec.k * (arr - 1.0))
        out = spec.k * s * (1.0 - s) * arr
    elif spec.kind == "clipped_linear":
        out = np.where(arr < spec.c, arr, 0.0)
    elif spec.kind == "temperature":
        g = gate_value(spec, arr)
        out = spec.beta_temp * np.asarray(g) * (1.0 - np.asarray(g))
    elif spec.kind == "identity_is":
        out = arr.copy()
    else:  # ppo_clip
        out = np.where(np.abs(arr - 1.0) < spec.eps_clip, arr, 0.0)
    return float(out) if np.isscalar(r) or np.ndim(r) == 0 else out


def gate_node(spec: GateSpec, ratio: dc.Node) -> dc.Node:
    """Differentiable gate applied to a strictly positive ratio node."""
    if spec.kind == "sigmoid":
        return dc.sigmoid((ratio - 1.0) * spec.k)
    if spec.kind == "clipped_linear":
        return dc.clip(ratio, 0.0, spec.c)
    if spec.kind == "temperature":
        return dc.sigmoid(dc.log(ratio) * spec.beta_temp)
    if spec.kind == "identity_is":
        return ratio
    return dc.clip(ratio, 1.0 - spec.eps_clip, 1.0 + spec.eps_clip)


def weight_supremum(spec: GateSpec, r_max: float = 20.0, n_points: int = 100_000) -> float:
    """Dense-grid supremum of w over [0, r_max]; the constant c of the
    variance bound.  Shipped gate parameters decay outside this range."""
    grid = np.linspace(0.0, r_max, n_points)
    return float(np.max(gate_weight(spec, grid)))


def grad_supremum(spec: GateSpec, r_max: float = 20.0, n_points: int = 100_000) -> float:
    """Dense-grid supremum of |g'| over (0, r_max]; the Lipschitz constant."""
    grid = np.linspace(0.0, r_max, n_points)
    with np.errstate(divide="ignore", invalid="ignore"):
        gprime = np.where(grid > 0, gate_weight(spec, grid) / grid, 0.0)
    if spec.kind in ("clipped_linear", "identity_is", "ppo_clip"):
        return 1.0  # piecewise linear with unit slope inside the active branch
    if spec.kind == "sigmoid":
        gprime[0] = spec.k * expit(-spec.k) * (1.0 - expit(-spec.k))
    return float(np.max(gprime))


def gate_grid(spec: GateSpec, r_min: float, r_max: float, n_points: int) -> np.ndarray:
    """Evenly spaced table of (r, g(r), w(r)) rows, shape (n_points, 3)."""
    if not (0 <= r_min < r_max):
        raise ValueError("need 0 <= r_min < r_max")
    if n_points < 2:
        raise ValueError("need at least 2 grid points")
    r = np.linspace(r_min, r_max, n_points)
    return np.column_stack([r, gate_value(spec, r), gate_weight(spec, r)])


def write_gate_grid(path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "g", "w"])
        for row in table:
            writer.writerow([repr(float(v)) for v in row])


@dataclass
class WeightHistogram:
    """Binned effective weights under a log-normal ratio model."""

    bin_edges: np.ndarray       # length n_bins + 1
    counts: np.ndarray          # length n_bins, sums to n_samples
    sample_mean: float
    sample_var: float
    n_samples: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            for left, right, count in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                writer.writerow([repr(float(left)), repr(float(right)), int(count)])


def weight_histogram(spec: GateSpec, sigma_log_r: float, n_samples: int,
                     rng: np.random.Generator, n_bins: int = 50) -> WeightHistogram:
    """Histogram of w(r) with r ~ LogNormal(0, sigma_log_r^2).

    Bin edges are fixed by the gate alone (0 to the grid supremum of w), so
    histograms for different sigma values share axes; samples beyond the top
    edge are counted in the last bin.
    """
    if not sigma_log_r > 0:
        raise ValueError("sigma_log_r must be positive")
    r = np.exp(rng.normal(0.0, sigma_log_r, size=n_samples))
    w = np.asarray(gate_weight(spec, r))
    top = max(weight_supremum(spec), 1e-12)
    edges = np.linspace(0.0, top * (1.0 + 1e-9), n_bins + 1)
    counts, _ = np.histogram(np.clip(w, 0.0, top), bins=edges)
    return WeightHistogram(bin_edges=edges, counts=counts,
                           sample_mean=float(w.mean()),
                           sample_var=float(w.var(ddof=1)) if n_samples > 1 else 0.0,
                           n_samples=n_samples)
