"""The full training loop: rollout, GAE, gated surrogate with a
differentiable KL penalty, clipped value regression, and the adaptive
penalty coefficient -- plus the PPO, AWR, REINFORCE and pure-IS baselines
under one loop.

All losses are minimized; surrogates that the literature maximizes are
negated.  The update loop is single threaded and deterministic under a
fixed seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import policy as pol
from .advantage import gae, normalize
from .diagnostics import IterationMetrics, ess, grad_variance, write_metrics
from .envlab import PointMassEnv
from .gatebank import GateSpec, gate_node, gate_weight
from .streams import named_stream
from .trustctl import (BetaController, backstop_triggered, beta_update,
                       is_spike, kl_hat, kl_hat_node)

ALGORITHMS = ("rgpo", "ppo", "awr", "reinforce", "identity_is")


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are the desk-scale recipe."""

    algorithm: str = "rgpo"
    gate: GateSpec = field(default_factory=GateSpec)
    learning_rate: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    minibatch_size: int = 64
    n_epochs: int = 10
    rollout_steps: int = 512
    target_kl: float = 0.02
    beta0: float = 0.5
    beta_min: float = 0.01
    beta_max: float = 5.0
    backstop_tau: float = 0.1
    value_clip: float = 0.2
    awr_beta: float = 1.0
    awr_weight_max: float = 20.0
    eps_clip: float = 0.2
    seed: int = 0
    total_iterations: int = 100
    optimizer: str = "sgd"           # "sgd" or "adam"
    adam_eps: float = 1e-5
    hidden: int = 64
    n_hidden: int = 1
    advantage_norm: bool = True
    obs_norm: bool = False
    reward_norm: bool = False
    env: str = "pointmass"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("learning_rate", "minibatch_size", "n_epochs", "rollout_steps",
                     "target_kl", "beta0", "awr_beta", "awr_weight_max", "hidden"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be nonnegative")

    def controller(self) -> BetaController:
        return BetaController(beta=self.beta0, beta_min=self.beta_min,
                              beta_max=self.beta_max, target_kl=self.target_kl,
                              backstop_tau=self.backstop_tau)


def config_from_mapping(mapping: dict) -> TrainConfig:
    """Build a TrainConfig from string key/value pairs (config files, CLI)."""
    gate_fields = {"kind", "k", "c", "beta_temp"}
    known = {f.name: f.type for f in fields(TrainConfig)}
    kwargs: dict = {}
    gate_kwargs: dict = {}
    for key, raw in mapping.items():
        if key.startswith("gate."):
            sub = key[5:]
            if sub not in gate_fields and sub != "eps_clip":
                raise KeyError(f"unknown config key {key!r}")
            gate_kwargs[sub] = raw if sub == "kind" else float(raw)
            continue
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        kind = known[key]
        if kind == "bool" or isinstance(getattr(TrainConfig, key, None), bool):
            kwargs[key] = str(raw).lower() in ("1", "true", "yes", "on")
        elif key in ("algorithm", "optimizer", "env"):
            kwargs[key] = str(raw)
        elif key in ("minibatch_size", "n_epochs", "rollout_steps", "seed",
                     "total_iterations", "hidden", "n_hidden"):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    if gate_kwargs:
        kwargs["gate"] = GateSpec(**gate_kwargs)
    return TrainConfig(**kwargs)


# --- value network -----------------------------------------------------------

class ValueNet:
    """State-value head mirroring the policy MLP with a scalar output."""

    family = "value_mlp"

    def __init__(self, obs_dim: int, hidden: int = 64, n_hidden: int = 1,
                 params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.obs_dim = int(obs_dim)
        self.mlp = pol.MLPSpec(obs_dim, 1, hidden=hidden, n_hidden=n_hidden)
        if params is None:
            params = self.mlp.init(rng or np.random.default_rng(0), out_scale=1.0)
        self.params = dc.tensor(params).copy()

    def clone(self) -> "ValueNet":
        return ValueNet(self.obs_dim, hidden=self.mlp.hidden,
                        n_hidden=self.mlp.n_hidden, params=self.params.copy())

    def structure(self) -> dict:
        return {"family": self.family, "obs_dim": self.obs_dim,
                "hidden": self.mlp.hidden, "n_hidden": self.mlp.n_hidden}

    def predict_np(self, states) -> np.ndarray:
        return self.mlp.forward_np(self.params, np.atleast_2d(states))[:, 0]

    def build(self, psi: dc.Node, states: np.ndarray) -> dc.Node:
        out = self.mlp.build(psi, 0, np.atleast_2d(states))
        return dc.reshape(out, (out.shape[0],))


# --- rollout ------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Trajectories collected under the behavior policy."""

    states: np.ndarray          # (N, obs_dim)
    actions: np.ndarray         # (N, act_dim)
    rewards: np.ndarray         # (N,)
    terminals: np.ndarray       # (N,) bool
    behavior_logp: np.ndarray   # (N,)
    values: np.ndarray          # (N,)
    bootstrap_value: float
    episode_returns: list[float]

    def __post_init__(self):
        n = self.states.shape[0]
        if not (self.actions.shape[0] == self.rewards.shape[0]
                == self.terminals.shape[0] == self.behavior_logp.shape[0]
                == self.values.shape[0] == n):
            raise ValueError("inconsistent batch lengths")
        if not np.all(np.isfinite(self.behavior_logp)):
            raise ValueError("non-finite behavior log-probs")


@dataclass
class Minibatch:
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    behavior_logp: np.ndarray
    returns: np.ndarray | None = None
    old_values: np.ndarray | None = None


def rollout(env, policy, n_steps: int, rng: np.random.Generator,
            value_fn=None, start_obs: np.ndarray | None = None):
    """Collect exactly n_steps transitions, resetting at terminals.

    Returns (batch, last_obs) so a persistent environment can continue from
    where the rollout stopped.  Behavior log-probs are recorded under the
    acting policy at sampling time.
    """
    obs = env.reset(rng) if start_obs is None else start_obs
    states, actions, rewards, terminals, logps, values = [], [], [], [], [], []
    episode_returns: list[float] = []
    running = 0.0
    for _ in range(n_steps):
        action = policy.sample(obs, rng)
        states.append(np.array(obs, dtype=np.float64, copy=True))
        actions.append(np.atleast_1d(np.asarray(action, dtype=np.float64)))
        logps.append(policy.log_prob(obs, action))
        values.append(float(value_fn(obs)) if value_fn is not None else 0.0)
        obs, reward, done = env.step(action, rng)
        rewards.append(float(reward))
        terminals.append(bool(done))
        running += reward
        if done:
            episode_returns.append(running)
            running = 0.0
            obs = env.reset(rng)
    bootstrap = float(value_fn(obs)) if value_fn is not None else 0.0
    batch = RolloutBatch(states=np.stack(states), actions=np.stack(actions),
                         rewards=np.array(rewards), terminals=np.array(terminals),
                         behavior_logp=np.array(logps), values=np.array(values),
                         bootstrap_value=bootstrap, episode_returns=episode_returns)
    return batch, obs


# --- losses -------------------------------------------------------------------

@dataclass
class LossEval:
    loss: float
    grad: np.ndarray
    ratios: np.ndarray | None
    kl_hat: float


def _minibatch_old_logp(mb: Minibatch, snapshot) -> np.ndarray:
    # recomputed on the minibatch rows so that theta == theta_old gives
    # bitwise-identical ratios of exactly 1
    return snapshot.log_probs_np(mb.states, _action_index(snapshot, mb.actions))


def _action_index(policy_like, actions):
    p = policy_like.policy if isinstance(policy_like, pol.PolicySnapshot) else policy_like
    if isinstance(p, pol.CategoricalPolicy):
        return np.asarray(actions, dtype=np.int64).reshape(-1)
    return actions


def _ratio_node(tape, policy, theta, mb: Minibatch, snapshot) -> dc.Node:
    logp = policy.build_log_prob(theta, mb.states, _action_index(policy, mb.actions))
    old_logp = tape.const(_minibatch_old_logp(mb, snapshot))
    return dc.exp(dc.sub(logp, old_logp))


def _eval(tape, theta, loss_node, ratio_node=None) -> LossEval:
    tape.set_output(loss_node)
    loss = float(dc.forward(tape, []))
    g = dc.grad(tape, [theta])[0]
    ratios = None if ratio_node is None else np.atleast_1d(tape.value(ratio_node)).copy()
    kl = kl_hat(ratios) if ratios is not None else 0.0
    return LossEval(loss=loss, grad=g, ratios=ratios, kl_hat=kl)


def rgpo_loss_eval(mb: Minibatch, policy, snapshot, gate: GateSpec, beta: float) -> LossEval:
    """-(mean of g(r) * A) + beta * kl_hat(r), with its gradient."""
    tape = dc.Tape()
    theta = tape.param(policy.params)
    ratio = _ratio_node(tape, policy, theta, mb, snapshot)
    surrogate = dc.mean(dc.mul(gate_node(gate, ratio), tape.const(mb.advantages)))
    loss = dc.add(dc.neg(surrogate), dc.scale(kl_hat_node(ratio), beta))
    return _eval(tape, theta, loss, ratio)


def ppo_loss_eval(mb: Minibatch, policy, snapshot, eps_clip: float) -> LossEval:
    """Clipped surrogate, negated for minimization; min ties keep the
    unclipped branch's gradient."""
    tape = dc.Tape()
    theta = tape.param(policy.params)
    ratio = _ratio_node(tape, policy, theta, mb, snapshot)
    adv = tape.const(mb.advantages)
    unclipped = dc.mul(ratio, adv)
    clipped = dc.mul(dc.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip), adv)
    loss = dc.neg(dc.mean(dc.minimum(unclipped, clipped)))
    return _eval(tape, theta, loss, ratio)


def awr_loss_eval(mb: Minibatch, policy, awr_beta: float,
                  weight_max: float = 20.0) -> LossEval:
    """Advantage-weighted behavior cloning: -(mean of exp(A/beta) * log pi);
    the weights are constants, so there is no ratio term at all."""
    weights = np.minimum(np.exp(np.asarray(mb.advantages) / awr_beta), weight_max)
    tape = dc.Tape()
    theta = tape.param(policy.params)
    logp = policy.build_log_prob(theta, mb.states, _action_index(policy, mb.actions))
    loss = dc.neg(dc.mean(dc.mul(logp, tape.const(weights))))
    return _eval(tape, theta, loss)


def reinforce_loss_eval(mb: Minibatch, policy) -> LossEval:
    """On-policy policy-gradient loss -(mean of log pi * A)."""
    tape = dc.Tape()
    theta = tape.param(policy.params)
    logp = policy.build_log_prob(theta, mb.states, _action_index(policy, mb.actions))
    loss = dc.neg(dc.mean(dc.mul(logp, tape.const(mb.advantages))))
    return _eval(tape, theta, loss)


def value_loss_eval(mb: Minibatch, value_net: ValueNet, eps_v: float | None) -> LossEval:
    """Clipped value regression: mean of max(unclipped, clipped) squared error,
    clipping the prediction around the rollout-time value.  Without old
    values it is a plain MSE."""
    tape = dc.Tape()
    psi = tape.param(value_net.params)
    v = value_net.build(psi, mb.states)
    returns = tape.const(mb.returns)
    err = dc.square(dc.sub(v, returns))
    if mb.old_values is not None and eps_v is not None:
        old = tape.const(mb.old_values)
        v_clipped = dc.add(old, dc.clip(dc.sub(v, old), -eps_v, eps_v))
        err = dc.maximum(err, dc.square(dc.sub(v_clipped, returns)))
    return _eval(tape, psi, dc.mean(err))


# convenience spec-surface wrappers returning the scalar loss only

def rgpo_loss(mb, policy, snapshot, gate, beta) -> float:
    return rgpo_loss_eval(mb, policy, snapshot, gate, beta).loss


def ppo_loss(mb, policy, snapshot, eps_clip) -> float:
    return ppo_loss_eval(mb, policy, snapshot, eps_clip).loss


def awr_loss(mb, policy, awr_beta, weight_max=20.0) -> float:
    return awr_loss_eval(mb, policy, awr_beta, weight_max).loss


def reinforce_loss(mb, policy) -> float:
    return reinforce_loss_eval(mb, policy).loss


def value_loss(mb, value_net, eps_v) -> float:
    return value_loss_eval(mb, value_net, eps_v).loss


# --- optimizers -----------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


class Adam:
    def __init__(self, lr: float, n_params: int, beta1=0.9, beta2=0.999, eps=1e-5):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(config: TrainConfig, n_params: int):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, n_params, eps=config.adam_eps)
    return SGD(config.learning_rate)


# --- running normalization (optional) ---------------------------------------------

class RunningNorm:
    """Welford running mean/variance for observation or reward scaling."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.ones(dim)

    def update(self, batch: np.ndarray) -> None:
        for row in np.atleast_2d(batch):
            self.count += 1
            delta = row - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (row - self.mean)

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(self.m2 / (self.count - 1)) + 1e-8

    def normalize(self, batch: np.ndarray) -> np.ndarray:
        return (batch - self.mean) / self.std()


# --- train state & loop --------------------------------------------------------------

@dataclass
class TrainState:
    policy: object
    value: ValueNet
    ctrl: BetaController
    iteration: int
    env: object
    obs: np.ndarray | None
    rollout_rng: np.random.Generator
    shuffle_rng: np.random.Generator
    policy_opt: object
    value_opt: object
    obs_norm: RunningNorm | None = None
    reward_norm: RunningNorm | None = None
    last_epoch_minibatches: int = 0
    last_mean_return: float = 0.0


def make_env(config: TrainConfig):
    if config.env == "pointmass":
        return PointMassEnv()
    raise ValueError(f"unknown env {config.env!r}")


def init_state(config: TrainConfig, env=None, policy=None) -> TrainState:
    env = env if env is not None else make_env(config)
    init_rng = named_stream(config.seed, "init")
    if policy is None:
        policy = pol.GaussianPolicy(env.obs_dim, env.act_dim, hidden=config.hidden,
                                    n_hidden=config.n_hidden, rng=init_rng)
    value = ValueNet(env.obs_dim, hidden=config.hidden, n_hidden=config.n_hidden,
                     rng=init_rng)
    return TrainState(
        policy=policy, value=value, ctrl=config.controller(), iteration=0,
        env=env, obs=None,
        rollout_rng=named_stream(config.seed, "rollout"),
        shuffle_rng=named_stream(config.seed, "shuffle"),
        policy_opt=_make_optimizer(config, policy.n_params),
        value_opt=_make_optimizer(config, value.params.size),
        obs_norm=RunningNorm(env.obs_dim) if config.obs_norm else None,
        reward_norm=RunningNorm(1) if config.reward_norm else None,
    )


def _policy_minibatch_eval(config: TrainConfig, mb: Minibatch, policy, snapshot,
                           beta: float) -> LossEval:
    if config.algorithm in ("rgpo", "identity_is"):
        gate = config.gate if config.algorithm == "rgpo" else GateSpec("identity_is")
        return rgpo_loss_eval(mb, policy, snapshot, gate, beta)
    if config.algorithm == "ppo":
        return ppo_loss_eval(mb, policy, snapshot, config.eps_clip)
    if config.algorithm == "awr":
        return awr_loss_eval(mb, policy, config.awr_beta, config.awr_weight_max)
    return reinforce_loss_eval(mb, policy)


def _ess_weights(config: TrainConfig, policy, snapshot, batch: RolloutBatch,
                 advantages: np.ndarray) -> np.ndarray:
    if config.algorithm == "reinforce":
        return np.ones(batch.states.shape[0])
    if config.algorithm == "awr":
        return np.minimum(np.exp(advantages / config.awr_beta), config.awr_weight_max)
    logp_new = policy.log_probs_np(batch.states, _action_index(policy, batch.actions))
    logp_old = snapshot.log_probs_np(batch.states, _action_index(policy, batch.actions))
    r = np.exp(logp_new - logp_old)
    if config.algorithm == "ppo":
        return np.clip(r, 1.0 - config.eps_clip, 1.0 + config.eps_clip)
    gate = config.gate if config.algorithm == "rgpo" else GateSpec("identity_is")
    return np.asarray(gate_weight(gate, r))


def train_iteration(state: TrainState, config: TrainConfig):
    """One outer-loop iteration; returns (state, IterationMetrics).

    The iteration snapshots the policy, collects a rollout, runs
    n_epochs x minibatch updates of policy and value (exiting the epoch loop
    after any minibatch whose KL estimate trips the hard backstop, keeping
    that update), then feeds the mean KL over processed minibatches to the
    adaptive beta controller.
    """
    t0 = time.perf_counter()
    snapshot = state.policy.snapshot()

    def value_fn(obs):
        return state.value.predict_np(obs)[0]

    batch, state.obs = rollout(state.env, state.policy, config.rollout_steps,
                               state.rollout_rng, value_fn=value_fn, start_obs=state.obs)
    rewards = batch.rewards
    if state.reward_norm is not None:
        state.reward_norm.update(rewards[:, None])
        rewards = rewards / state.reward_norm.std()[0]
    adv_res = gae(rewards, batch.values, batch.terminals, batch.bootstrap_value,
                  config.gamma, config.lam)
    advantages = normalize(adv_res.advantages) if config.advantage_norm \
        else adv_res.advantages

    n = batch.states.shape[0]
    n_epochs = 1 if config.algorithm == "reinforce" else config.n_epochs
    minibatch_kls: list[float] = []
    policy_grads: list[np.ndarray] = []
    stop = False
    for _ in range(n_epochs):
        perm = state.shuffle_rng.permutation(n)
        for lo in range(0, n, config.minibatch_size):
            idx = perm[lo:lo + config.minibatch_size]
            mb = Minibatch(states=batch.states[idx], actions=batch.actions[idx],
                           advantages=advantages[idx],
                           behavior_logp=batch.behavior_logp[idx],
                           returns=adv_res.returns[idx], old_values=batch.values[idx])
            res = _policy_minibatch_eval(config, mb, state.policy, snapshot,
                                         state.ctrl.beta)
            state.policy.params = state.policy_opt.step(state.policy.params, res.grad)
            policy_grads.append(res.grad)

            vres = value_loss_eval(mb, state.value, config.value_clip)
            state.value.params = state.value_opt.step(state.value.params, vres.grad)

            mb_kl = res.kl_hat if res.ratios is not None else _measured_kl(
                mb, state.policy, snapshot)
            minibatch_kls.append(mb_kl)
            if backstop_triggered(mb_kl, config.backstop_tau):
                stop = True
                break   # keep the offending update, exit the epoch loop
        if stop:
            break

    mean_kl = float(np.mean(minibatch_kls)) if minibatch_kls else 0.0
    max_kl = float(np.max(minibatch_kls)) if minibatch_kls else 0.0
    weights = _ess_weights(config, state.policy, snapshot, batch, advantages)
    if batch.episode_returns:
        mean_return = float(np.mean(batch.episode_returns))
        state.last_mean_return = mean_return
    else:
        horizon = getattr(state.env, "horizon", n)
        mean_return = float(batch.rewards.sum() / n * horizon)

    metrics = IterationMetrics(
        iteration=state.iteration,
        mean_return=mean_return,
        mean_kl=mean_kl,
        max_kl=max_kl,
        spike=is_spike(mean_kl, config.target_kl),
        ess=ess(weights) if weights.sum() > 0 else 0.0,
        grad_variance=grad_variance(policy_grads) if len(policy_grads) >= 2 else 0.0,
        beta=state.ctrl.beta,
        wall_seconds=time.perf_counter() - t0,
    )
    state.ctrl = beta_update(state.ctrl, mean_kl)
    state.iteration += 1
    state.last_epoch_minibatches = len(minibatch_kls)
    return state, metrics


def _measured_kl(mb: Minibatch, policy, snapshot) -> float:
    """kl_hat of recomputed ratios; the drift measurement for losses that do
    not carry a ratio term (AWR, REINFORCE)."""
    logp_new = policy.log_probs_np(mb.states, _action_index(policy, mb.actions))
    logp_old = _minibatch_old_logp(mb, snapshot)
    return kl_hat(np.exp(logp_new - logp_old))


@dataclass
class TrainResult:
    metrics: list[IterationMetrics]
    csv_path: Path | None
    policy_path: Path | None
    value_path: Path | None
    state: TrainState


def train(config: TrainConfig, out_dir=None, env=None) -> TrainResult:
    """Run total_iterations iterations; write the metrics CSV and final
    parameters when out_dir is given.  Deterministic under a fixed seed,
    except for the wall_seconds column."""
    state = init_state(config, env=env)
    metrics: list[IterationMetrics] = []
    for _ in range(config.total_iterations):
        state, m = train_iteration(state, config)
        metrics.append(m)

    csv_path = policy_path = value_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"metrics_seed{config.seed}.csv"
        write_metrics(csv_path, metrics)
        policy_path = out / f"policy_seed{config.seed}.npz"
        value_path = out / f"value_seed{config.seed}.npz"
        pol.save_params(state.policy, policy_path)
        pol.save_params(state.value, value_path)
    return TrainResult(metrics=metrics, csv_path=csv_path,
                       policy_path=policy_path, value_path=value_path, state=state)


def evaluate_policy(env, policy, n_episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted episode return of a fixed policy."""
    totals = []
    for _ in range(n_episodes):
        obs = env.reset(rng)
        total, done = 0.0, False
        while not done:
            obs, reward, done = env.step(policy.sample(obs, rng), rng)
            total += reward
        totals.append(total)
    return float(np.mean(totals))
