"""Parametric stochastic policies with exact log-probabilities, sampling,
closed-form KL, and tape builders for the differentiable losses.

Parameters live in one flat float64 vector per network.  The numpy
evaluation paths mirror the tape ops operation for operation, so evaluating
a policy and running its tape under identical parameters is bitwise
identical; the on-policy invariants (ratio == 1 exactly on the first
minibatch) rely on this.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, rel_entr, softmax

from . import diffcore as dc

_LOG_2PI = math.log(2.0 * math.pi)


# --- shared MLP machinery -------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    """Tanh MLP with 1 or 2 hidden layers and a linear head."""

    in_dim: int
    out_dim: int
    hidden: int = 64
    n_hidden: int = 1

    def __post_init__(self):
        if self.n_hidden not in (1, 2):
            raise ValueError("n_hidden must be 1 or 2")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden] * self.n_hidden + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_dims)

    def init(self, rng: np.random.Generator, out_scale: float = 0.01) -> np.ndarray:
        """Uniform +-1/sqrt(fan_in) weights; the head is shrunk by out_scale
        so the initial policy stays near zero-mean and early ratios near 1."""
        chunks = []
        layers = self.layer_dims
        for li, (a, b) in enumerate(layers):
            bound = 1.0 / math.sqrt(a)
            w = rng.uniform(-bound, bound, size=(a, b))
            bias = np.zeros(b)
            if li == len(layers) - 1:
                w = w * out_scale
            chunks.extend([w.ravel(), bias])
        return np.concatenate(chunks)

    def forward_np(self, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        off = 0
        layers = self.layer_dims
        for li, (a, b) in enumerate(layers):
            w = flat[off:off + a * b].reshape(a, b)
            off += a * b
            bias = flat[off:off + b]
            off += b
            h = h @ w + bias[None, :]
            if li < len(layers) - 1:
                h = np.tanh(h)
        return h

    def build(self, theta: dc.Node, offset: int, x: np.ndarray) -> dc.Node:
        tape = theta.tape
        h = tape.const(np.asarray(x, dtype=np.float64))
        off = offset
        layers = self.layer_dims
        for li, (a, b) in enumerate(layers):
            w = dc.reshape(dc.segment(theta, off, off + a * b), (a, b))
            off += a * b
            bias = dc.segment(theta, off, off + b)
            off += b
            h = dc.add_rowvec(dc.matmul(h, w), bias)
            if li < len(layers) - 1:
                h = dc.tanh(h)
        return h


# --- policies --------------------------------------------------------------

class CategoricalPolicy:
    """Discrete-action policy: tabular logits per state, or a linear map of
    state features to logits."""

    family = "categorical"

    def __init__(self, *, n_states: int | None = None, feat_dim: int | None = None,
                 n_actions: int, params: np.ndarray | None = None):
        if (n_states is None) == (feat_dim is None):
            raise ValueError("give exactly one of n_states (tabular) or feat_dim (linear)")
        self.n_states = n_states
        self.feat_dim = feat_dim
        self.n_actions = int(n_actions)
        rows = n_states if n_states is not None else feat_dim
        self._shape = (int(rows), self.n_actions)
        if params is None:
            params = np.zeros(self._shape[0] * self._shape[1])
        self.params = dc.tensor(params).copy()
        if self.params.shape != (self._shape[0] * self._shape[1],):
            raise ValueError("params length does not match the logits table")

    @classmethod
    def tabular(cls, n_states: int, n_actions: int) -> "CategoricalPolicy":
        return cls(n_states=n_states, n_actions=n_actions)

    @classmethod
    def linear(cls, feat_dim: int, n_actions: int,
               rng: np.random.Generator | None = None) -> "CategoricalPolicy":
        params = None
        if rng is not None:
            params = rng.uniform(-1, 1, size=feat_dim * n_actions) / math.sqrt(feat_dim)
        return cls(feat_dim=feat_dim, n_actions=n_actions, params=params)

    @property
    def is_tabular(self) -> bool:
        return self.n_states is not None

    @property
    def n_params(self) -> int:
        return self.params.size

    def clone(self) -> "CategoricalPolicy":
        return CategoricalPolicy(n_states=self.n_states, feat_dim=self.feat_dim,
                                 n_actions=self.n_actions, params=self.params.copy())

    def structure(self) -> dict:
        return {"family": self.family, "n_states": self.n_states,
                "feat_dim": self.feat_dim, "n_actions": self.n_actions}

    # -- evaluation --

    def logits_np(self, states) -> np.ndarray:
        table = self.params.reshape(self._shape)
        if self.is_tabular:
            idx = np.asarray(states, dtype=np.int64)
            return table[idx]
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return x @ table

    def log_probs_np(self, states, actions) -> np.ndarray:
        logits = self.logits_np(states)
        actions = np.asarray(actions, dtype=np.int64)
        lse = logsumexp(logits, axis=1)
        return logits[np.arange(logits.shape[0]), actions] - lse

    def log_prob(self, state, action: int) -> float:
        return float(self.log_probs_np([state] if self.is_tabular else np.atleast_2d(state),
                                       [action])[0])

    def action_probs(self, state) -> np.ndarray:
        return softmax(self.logits_np([state] if self.is_tabular else np.atleast_2d(state))[0])

    def all_probs(self) -> np.ndarray:
        """(n_states, n_actions) matrix of action probabilities (tabular only)."""
        if not self.is_tabular:
            raise ValueError("all_probs requires a tabular policy")
        return softmax(self.params.reshape(self._shape), axis=1)

    def sample(self, state, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_actions, p=self.action_probs(state)))

    def build_log_prob(self, theta: dc.Node, states, actions) -> dc.Node:
        """Tape node of log pi(a|s) for a batch; differentiable in theta."""
        table = dc.reshape(theta, self._shape)
        if self.is_tabular:
            rows = dc.gather_rows(table, np.asarray(states, dtype=np.int64))
        else:
            x = np.atleast_2d(np.asarray(states, dtype=np.float64))
            rows = dc.matmul(theta.tape.const(x), table)
        lse = dc.logsumexp_rows(rows)
        chosen = dc.take_per_row(rows, np.asarray(actions, dtype=np.int64))
        return dc.sub(chosen, lse)

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot(self)

    def kl_exact(self, other, state) -> float:
        """KL(self(.|s) || other(.|s)) for categorical distributions."""
        p = self.action_probs(state)
        q = _policy_of(other).action_probs(state)
        return float(np.sum(rel_entr(p, q)))


class GaussianPolicy:
    """Diagonal Gaussian policy: MLP mean, state-independent log-std vector."""

    family = "gaussian"

    def __init__(self, obs_dim: int, act_dim: int, hidden: int = 64, n_hidden: int = 1,
                 params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.mlp = MLPSpec(obs_dim, act_dim, hidden=hidden, n_hidden=n_hidden)
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = np.concatenate([self.mlp.init(rng), np.zeros(act_dim)])
        self.params = dc.tensor(params).copy()
        if self.params.shape != (self.mlp.n_params + act_dim,):
            raise ValueError("params length does not match the architecture")

    @property
    def n_params(self) -> int:
        return self.params.size

    def clone(self) -> "GaussianPolicy":
        return GaussianPolicy(self.obs_dim, self.act_dim, hidden=self.mlp.hidden,
                              n_hidden=self.mlp.n_hidden, params=self.params.copy())

    def structure(self) -> dict:
        return {"family": self.family, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "hidden": self.mlp.hidden, "n_hidden": self.mlp.n_hidden}

    @property
    def log_std(self) -> np.ndarray:
        return self.params[self.mlp.n_params:]

    def mean_np(self, states) -> np.ndarray:
        return self.mlp.forward_np(self.params, np.atleast_2d(states))

    def log_probs_np(self, states, actions) -> np.ndarray:
        # mirrors build_log_prob op for op (bitwise identical to the tape path)
        mean = self.mean_np(states)
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        log_std = self.log_std
        diff = actions - mean
        quad = (diff * diff) * np.exp(log_std * -2.0)[None, :]
        return (quad.sum(axis=1) * -0.5 - log_std.sum()) + (-0.5 * self.act_dim * _LOG_2PI)

    def log_prob(self, state, action) -> float:
        return float(self.log_probs_np(np.atleast_2d(state), np.atleast_2d(action))[0])

    def sample(self, state, rng: np.random.Generator) -> np.ndarray:
        mean = self.mean_np(state)[0]
        return mean + np.exp(self.log_std) * rng.standard_normal(self.act_dim)

    def build_log_prob(self, theta: dc.Node, states, actions) -> dc.Node:
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        acts = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        mean = self.mlp.build(theta, 0, x)
        log_std = dc.segment(theta, self.mlp.n_params, self.mlp.n_params + self.act_dim)
        diff = dc.sub(theta.tape.const(acts), mean)
        quad = dc.mul_rowvec(dc.square(diff), dc.exp(dc.scale(log_std, -2.0)))
        return dc.shift(dc.sub(dc.scale(dc.sum_rows(quad), -0.5), dc.total(log_std)),
                        -0.5 * self.act_dim * _LOG_2PI)

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot(self)

    def kl_exact(self, other, state) -> float:
        """KL(self(.|s) || other(.|s)) for diagonal Gaussians."""
        other = _policy_of(other)
        if not isinstance(other, GaussianPolicy) or other.act_dim != self.act_dim:
            raise ValueError("KL requires a Gaussian policy of matching dimension")
        mu1, mu2 = self.mean_np(state)[0], other.mean_np(state)[0]
        s1, s2 = self.log_std, other.log_std
        var1, var2 = np.exp(2.0 * s1), np.exp(2.0 * s2)
        return float(np.sum(s2 - s1 + (var1 + (mu1 - mu2) ** 2) / (2.0 * var2) - 0.5))


class PolicySnapshot:
    """Frozen copy of a policy's parameters (behavior or reference policy)."""

    def __init__(self, policy):
        clone = policy.clone()
        clone.params.setflags(write=False)
        object.__setattr__(self, "policy", clone)

    def __getattr__(self, name):
        return getattr(self.policy, name)

    def __setattr__(self, name, value):
        raise AttributeError("snapshots are immutable")


def _policy_of(obj):
    return obj.policy if isinstance(obj, PolicySnapshot) else obj


# -- spec-surface convenience wrappers --------------------------------------

def log_prob(policy, state, action) -> float:
    return _policy_of(policy).log_prob(state, action)


def sample(policy, state, rng: np.random.Generator):
    return _policy_of(policy).sample(state, rng)


def ratio(policy, snapshot, state, action) -> float:
    """Importance ratio pi_new(a|s) / pi_old(a|s) via exp of log-prob difference."""
    new, old = _policy_of(policy), _policy_of(snapshot)
    if new.family != old.family:
        raise ValueError("policy and snapshot families differ")
    return math.exp(new.log_prob(state, action) - old.log_prob(state, action))


def kl_exact(policy, snapshot, state) -> float:
    return _policy_of(policy).kl_exact(snapshot, state)


# -- persistence -------------------------------------------------------------

def save_params(policy, path) -> None:
    """NPZ with the flat float64 vector plus a JSON structure record.

    NPY inside the archive carries the shape header; round-trips bit-exactly.
    """
    np.savez(path, params=_policy_of(policy).params,
             structure=np.frombuffer(json.dumps(_policy_of(policy).structure()).encode(),
                                     dtype=np.uint8))


def load_params(path):
    """Rebuild the saved policy (or value head, which is a GaussianPolicy-style
    MLP wrapped by the trainer) from an NPZ written by save_params."""
    with np.load(path) as data:
        structure = json.loads(bytes(data["structure"]).decode())
        params = data["params"]
    family = structure.pop("family")
    if family == "categorical":
        return CategoricalPolicy(n_states=structure["n_states"],
                                 feat_dim=structure["feat_dim"],
                                 n_actions=structure["n_actions"], params=params)
    if family == "gaussian":
        return GaussianPolicy(structure["obs_dim"], structure["act_dim"],
                              hidden=structure["hidden"], n_hidden=structure["n_hidden"],
                              params=params)
    if family == "value_mlp":
        from .trainer import ValueNet
        return ValueNet(structure["obs_dim"], hidden=structure["hidden"],
                        n_hidden=structure["n_hidden"], params=params)
    raise ValueError(f"unknown policy family {family!r}")
