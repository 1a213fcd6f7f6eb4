"""The six figure kinds rendered from the lab's documented CSV schemas.

Inputs are never mutated and rendering is deterministic for identical
inputs.  Multi-seed curve figures draw the across-seed mean with a +-1 std
band; a single input draws a bare line.  KL figures use a log scale with a
dashed threshold line.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("learning_curve", "kl_spectrum", "gate_curves", "ess_curve",
         "gradvar_curve", "pareto")

_METRIC_COLUMN = {
    "learning_curve": ("mean_return", "mean episodic return"),
    "kl_spectrum": ("mean_kl", "mean KL per iteration"),
    "ess_curve": ("ess", "normalized ESS"),
    "gradvar_curve": ("grad_variance", "gradient variance"),
}

DEFAULT_KL_THRESHOLD = 0.04


@dataclass
class FigureSpec:
    kind: str
    inputs: list[str | Path]
    out: str | Path
    threshold: float | None = None
    title: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")
        if not self.inputs:
            raise ValueError("at least one input CSV is required")


def read_columns(path, required: tuple[str, ...]) -> dict[str, np.ndarray]:
    """Load named CSV columns as float arrays; missing columns are errors
    naming the column.  Non-numeric trailing rows (summary tags) are kept
    out by the caller-specific readers."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise ValueError(f"{path}: missing required column {column!r}")
        rows = list(reader)
    out: dict[str, np.ndarray] = {}
    for column in required:
        out[column] = np.array([float(r[column]) for r in rows])
    return out


def _read_curves(paths, column: str) -> tuple[np.ndarray, np.ndarray]:
    """(iterations, matrix of one row per seed) for a metrics column."""
    series = []
    iters = None
    for path in paths:
        data = read_columns(path, ("iteration", column))
        if iters is None:
            iters = data["iteration"]
        elif len(data[column]) != len(iters):
            raise ValueError(f"{path}: iteration count differs across inputs")
        series.append(data[column])
    return iters, np.vstack(series)


def _read_alignment_summary(path) -> tuple[float, float]:
    """(mean_reward, kl_ref) from the trailing window summary row."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    for column in ("iteration", "mean_reward", "kl_ref"):
        if column not in header:
            raise ValueError(f"{path}: missing required column {column!r}")
    last = rows[-1]
    if not last[0].startswith("window"):
        raise ValueError(f"{path}: no window summary row found")
    return (float(last[header.index("mean_reward")]),
            float(last[header.index("kl_ref")]))


def _method_of(path) -> str:
    stem = Path(path).stem
    match = re.match(r"align_(.+)_seed\d+", stem)
    return match.group(1) if match else stem


def build_figure(spec: FigureSpec):
    """Construct the matplotlib Figure without writing it (used by tests)."""
    if spec.kind in _METRIC_COLUMN:
        column, ylabel = _METRIC_COLUMN[spec.kind]
        iters, series = _read_curves(spec.inputs, column)
        fig, ax = plt.subplots(figsize=(6, 4))
        mean = series.mean(axis=0)
        ax.plot(iters, mean, color="tab:orange", label=f"mean over {len(series)} seed(s)")
        if series.shape[0] > 1:
            std = series.std(axis=0)
            ax.fill_between(iters, mean - std, mean + std,
                            color="tab:orange", alpha=0.25, linewidth=0)
        if spec.kind == "kl_spectrum":
            ax.set_yscale("log")
            threshold = DEFAULT_KL_THRESHOLD if spec.threshold is None else spec.threshold
            ax.axhline(threshold, color="red", linestyle="--",
                       label=f"spike threshold {threshold:g}")
        elif spec.threshold is not None:
            ax.axhline(spec.threshold, color="red", linestyle="--",
                       label=f"threshold {spec.threshold:g}")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.legend(loc="best", fontsize=8)
    elif spec.kind == "gate_curves":
        fig, (ax_g, ax_w) = plt.subplots(1, 2, figsize=(9, 4))
        for path in spec.inputs:
            data = read_columns(path, ("r", "g", "w"))
            label = Path(path).stem.replace("gate_", "")
            ax_g.plot(data["r"], data["g"], label=label)
            ax_w.plot(data["r"], data["w"], label=label)
        ax_g.set_xlabel("ratio r")
        ax_g.set_ylabel("gate value g(r)")
        ax_w.set_xlabel("ratio r")
        ax_w.set_ylabel("effective weight w(r)")
        ax_g.legend(fontsize=8)
    else:  # pareto
        fig, ax = plt.subplots(figsize=(5.5, 4.5))
        per_method: dict[str, list[tuple[float, float]]] = {}
        for path in spec.inputs:
            reward, kl_ref = _read_alignment_summary(path)
            per_method.setdefault(_method_of(path), []).append((kl_ref, reward))
        points = np.array([p for pts in per_method.values() for p in pts])
        ax.scatter(points[:, 0], points[:, 1], s=18, color="grey", alpha=0.6,
                   label="individual seeds")
        means = np.array([np.mean(pts, axis=0) for pts in per_method.values()])
        ax.scatter(means[:, 0], means[:, 1], s=140, marker="D",
                   c=range(len(per_method)), cmap="viridis", label="method means")
        for (x, y), name in zip(means, per_method):
            ax.annotate(name, (x, y), textcoords="offset points", xytext=(6, 4),
                        fontsize=8)
        ax.set_xlabel("KL to reference (lower is better)")
        ax.set_ylabel("reward (higher is better)")
        ax.legend(fontsize=8, loc="best")
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    return fig


def render(spec: FigureSpec) -> Path:
    """Render the figure to spec.out and return the path."""
    fig = build_figure(spec)
    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
