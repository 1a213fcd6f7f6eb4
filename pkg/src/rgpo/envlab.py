"""Desk-scale environments and synthetic distributions: an exactly solvable
MDP (the oracle for the theorem checks), a continuous point-mass task, and a
power-law ratio sampler for the heavy-tail experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import CategoricalPolicy, PolicySnapshot


# --- exactly solvable MDP ---------------------------------------------------

@dataclass
class ExactMDP:
    """Finite MDP with dense transition/reward tensors.

    transition[s, a, s'] = P(s'|s, a); reward[s, a]; start[s] is the initial
    state distribution.  gamma < 1 keeps every linear system nonsingular.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    start: np.ndarray

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.start = np.asarray(self.start, dtype=np.float64)
        s, a, s2 = self.transition.shape
        if s != s2 or self.reward.shape != (s, a) or self.start.shape != (s,):
            raise ValueError("inconsistent tensor shapes")
        if not np.allclose(self.transition.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if abs(self.start.sum() - 1.0) > 1e-12 or np.any(self.start < 0):
            raise ValueError("start must be a distribution")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def random_mdp(n_states: int, n_actions: int, gamma: float,
               rng: np.random.Generator, reward_scale: float = 1.0) -> ExactMDP:
    """Dirichlet transition rows, normal rewards, Dirichlet start distribution."""
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.normal(scale=reward_scale, size=(n_states, n_actions))
    start = rng.dirichlet(np.ones(n_states))
    return ExactMDP(transition=transition, reward=reward, gamma=gamma, start=start)


@dataclass
class ExactSolution:
    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    J: float
    residual: float


def _probs_matrix(policy) -> np.ndarray:
    pol = policy.policy if isinstance(policy, PolicySnapshot) else policy
    if not isinstance(pol, CategoricalPolicy) or not pol.is_tabular:
        raise ValueError("exact solves need a tabular categorical policy")
    return pol.all_probs()


def solve_exact(mdp: ExactMDP, policy) -> ExactSolution:
    """V, Q, A and the start-weighted return J by direct linear solves.

    V solves (I - gamma * P_pi) V = R_pi; Q = R + gamma * P V; A = Q - V.
    The Bellman residual of the solve is reported and must be tiny.
    """
    probs = _probs_matrix(mdp_policy_check(mdp, policy))
    p_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", probs, mdp.reward)
    n = mdp.n_states
    V = np.linalg.solve(np.eye(n) - mdp.gamma * p_pi, r_pi)
    residual = float(np.max(np.abs((np.eye(n) - mdp.gamma * p_pi) @ V - r_pi)))
    Q = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.transition, V)
    A = Q - V[:, None]
    J = float(mdp.start @ V)
    return ExactSolution(V=V, Q=Q, A=A, J=J, residual=residual)


def mdp_policy_check(mdp: ExactMDP, policy):
    pol = policy.policy if isinstance(policy, PolicySnapshot) else policy
    if pol.n_states != mdp.n_states or pol.n_actions != mdp.n_actions:
        raise ValueError("policy shape does not match the MDP")
    return policy


def occupancy(mdp: ExactMDP, policy, normalized: bool = True) -> np.ndarray:
    """Discounted state occupancy d(s) = sum_t gamma^t P(s_t = s).

    Solves (I - gamma * P_pi^T) d = start; with normalized=True the result is
    scaled by (1 - gamma) so it is a probability distribution.
    """
    probs = _probs_matrix(mdp_policy_check(mdp, policy))
    p_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    d = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi.T, mdp.start)
    return d * (1.0 - mdp.gamma) if normalized else d


def exact_expectation(mdp: ExactMDP, state_weights: np.ndarray, action_policy,
                      values: np.ndarray) -> float:
    """sum_s w(s) sum_a pi(a|s) values[s, a]; the exact-sum oracle."""
    probs = _probs_matrix(action_policy)
    return float(np.einsum("s,sa,sa->", state_weights, probs, values))


# --- continuous point-mass task ----------------------------------------------

@dataclass
class PointMassEnv:
    """Double integrator in the plane driven to the origin.

    Observation is (position, velocity) in R^4; the 2-D force action is
    clamped to [-1, 1] per axis (out-of-range actions are counted, not
    errors).  Reward is -(|pos|^2 + 0.01 |a|^2); episodes end at the horizon.
    """

    horizon: int = 100
    noise: float = 0.05
    dt: float = 0.3
    damping: float = 0.95
    state_cap: float = 5.0

    obs_dim: int = field(init=False, default=4)
    act_dim: int = field(init=False, default=2)

    def __post_init__(self):
        self._pos = np.zeros(2)
        self._vel = np.zeros(2)
        self._t = 0
        self.clamp_count = 0

    def _obs(self) -> np.ndarray:
        return np.concatenate([self._pos, self._vel])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._pos = rng.uniform(-1.0, 1.0, size=2)
        self._vel = np.zeros(2)
        self._t = 0
        return self._obs()

    def step(self, action, rng: np.random.Generator):
        """Returns (obs, reward, done)."""
        a = np.asarray(action, dtype=np.float64)
        clamped = np.clip(a, -1.0, 1.0)
        if np.any(clamped != a):
            self.clamp_count += 1
        reward = -(float(self._pos @ self._pos) + 0.01 * float(clamped @ clamped))
        self._vel = self.damping * self._vel + self.dt * clamped \
            + self.noise * rng.standard_normal(2)
        self._vel = np.clip(self._vel, -self.state_cap, self.state_cap)
        self._pos = np.clip(self._pos + self.dt * self._vel,
                            -self.state_cap, self.state_cap)
        self._t += 1
        return self._obs(), reward, self._t >= self.horizon


def pd_controller(obs: np.ndarray, kp: float = 1.2, kd: float = 2.0) -> np.ndarray:
    """Hand-tuned proportional-derivative feedback; the LQR-like baseline."""
    return np.clip(-kp * obs[:2] - kd * obs[2:], -1.0, 1.0)


def episode_return(env: PointMassEnv, act_fn, rng: np.random.Generator) -> float:
    obs = env.reset(rng)
    total = 0.0
    done = False
    while not done:
        obs, reward, done = env.step(act_fn(obs), rng)
        total += reward
    return total


# --- heavy-tailed ratio sampler ------------------------------------------------

@dataclass(frozen=True)
class ParetoSampler:
    """Pareto ratios with unit scale: P(r > t) = t^(-alpha) for t >= 1."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be at least 1")
        u = rng.random(n)
        return u ** (-1.0 / self.alpha)

    def cdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return np.where(t >= 1.0, 1.0 - t ** (-self.alpha), 0.0)

    def second_moment(self) -> float:
        """E[r^2] = alpha / (alpha - 2), infinite for alpha <= 2."""
        return self.alpha / (self.alpha - 2.0) if self.alpha > 2.0 else np.inf


def sample_pareto(sampler: ParetoSampler, n: int, rng: np.random.Generator) -> np.ndarray:
    return sampler.sample(n, rng)
