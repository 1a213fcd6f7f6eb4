"""Soft trust region: the KL estimator, the adaptive penalty coefficient,
and the spike / hard-backstop predicates.

The estimator kl_hat = mean(r - 1 - ln r) is nonnegative with equality only
at r == 1, and doubles as the differentiable penalty term in the practical
loss; the same formula serves estimation and penalization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class BetaController:
    """Adaptive KL penalty coefficient with doubling/halving updates."""

    beta: float = 0.5
    beta_min: float = 0.01
    beta_max: float = 5.0
    target_kl: float = 0.02
    backstop_tau: float = 0.1

    def __post_init__(self):
        if not self.target_kl > 0:
            raise ValueError("target_kl must be positive")
        if not self.beta_min <= self.beta <= self.beta_max:
            raise ValueError("beta must lie in [beta_min, beta_max]")
        if not self.backstop_tau > self.target_kl:
            raise ValueError("backstop_tau must exceed target_kl")


def kl_hat(ratios) -> float:
    """Minibatch KL estimate: mean over samples of r - 1 - ln r."""
    r = np.asarray(ratios, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("ratios must be strictly positive")
    return float(np.mean(r - 1.0 - np.log(r)))


def kl_hat_node(ratio: dc.Node) -> dc.Node:
    """Differentiable kl_hat over a strictly positive ratio node."""
    return dc.mean(dc.sub(dc.shift(ratio, -1.0), dc.log(ratio)))


def beta_update(ctrl: BetaController, mean_kl: float) -> BetaController:
    """One adaptive step: double on overshoot, halve on undershoot.

    mean_kl >= 1.5 * target doubles beta (capped at beta_max);
    mean_kl <= target / 1.5 halves it (floored at beta_min);
    otherwise beta is unchanged.
    """
    if mean_kl < 0:
        raise ValueError("mean_kl must be nonnegative")
    if mean_kl >= 1.5 * ctrl.target_kl:
        return replace(ctrl, beta=min(2.0 * ctrl.beta, ctrl.beta_max))
    if mean_kl <= ctrl.target_kl / 1.5:
        return replace(ctrl, beta=max(ctrl.beta / 2.0, ctrl.beta_min))
    return ctrl


def is_spike(mean_kl: float, target_kl: float) -> bool:
    """An iteration spikes when mean KL strictly exceeds twice the target."""
    if not target_kl > 0:
        raise ValueError("target_kl must be positive")
    return mean_kl > 2.0 * target_kl


def backstop_triggered(mean_kl: float, tau: float) -> bool:
    """Hard early-exit condition: mean KL strictly exceeds tau."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return mean_kl > tau
