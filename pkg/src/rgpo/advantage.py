"""Return and advantage estimation for rollout batches.

GAE follows the standard backward recursion over temporal-difference errors,
truncated at terminals; returns are advantages plus value predictions, which
is what the value head regresses against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

_STD_FLOOR = 1e-8


@dataclass
class AdvantageResult:
    advantages: np.ndarray
    returns: np.ndarray


def gae(rewards, values, terminal_flags, bootstrap_value: float,
        gamma: float, lam: float) -> AdvantageResult:
    """Generalized advantage estimates.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - terminal_t) - V(s_t)
    A_t     = delta_t + gamma * lam * (1 - terminal_t) * A_{t+1}

    V(s_{t+1}) for the last step is ``bootstrap_value``; a terminal flag cuts
    both the bootstrap and the recursion, so advantages after a terminal are
    independent of anything before it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminal_flags, dtype=bool)
    if not (rewards.shape == values.shape == terminals.shape) or rewards.ndim != 1:
        raise ValueError("rewards, values and terminal_flags must be equal-length vectors")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")

    n = rewards.size
    adv = np.zeros(n)
    next_value = float(bootstrap_value)
    running = 0.0
    for t in range(n - 1, -1, -1):
        cont = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * next_value * cont - values[t]
        running = delta + gamma * lam * cont * running
        adv[t] = running
        next_value = values[t]
    return AdvantageResult(advantages=adv, returns=adv + values)


def normalize(advantages) -> np.ndarray:
    """Standardize to mean 0, std 1; all zeros if the input is (near) constant."""
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.size < 2:
        raise ValueError("need at least 2 advantages to normalize")
    std = adv.std()
    if std < _STD_FLOOR:
        return np.zeros_like(adv)
    return (adv - adv.mean()) / std


def group_relative_advantage(rewards_per_group: Sequence[Sequence[float]]) -> list[np.ndarray]:
    """Within-group standardization: (reward - group mean) / (group std + 1e-8)."""
    out = []
    for group in rewards_per_group:
        g = np.asarray(group, dtype=np.float64)
        if g.size < 2:
            raise ValueError("each group needs at least 2 members")
        out.append((g - g.mean()) / (g.std() + _STD_FLOOR))
    return out
