"""Toy preference-alignment track on a categorical contextual bandit.

A frozen reward table plays the automated reward model; the policy is
anchored both to the previous iterate (gated surrogate + KL-hat penalty)
and to a frozen reference policy (exact closed-form KL penalty).  PPO-RLHF
(clip + reference penalty) and GRPO (clip + group advantages, no reference
anchor) run as baselines under the same loop.

Rewards and the reference/old KL metrics are exact sums over the enumerable
prompt-response space; sampling enters only through the gated surrogate so
the optimization path matches the trainer's.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .advantage import group_relative_advantage
from .gatebank import GateSpec, gate_node
from .policy import CategoricalPolicy, PolicySnapshot
from .streams import named_stream
from .trustctl import BetaController, beta_update, kl_hat_node

ALIGN_ALGORITHMS = ("rgpo_dual", "rgpo_maxratio", "ppo_rlhf", "grpo")

SUMMARY_TAG = "window_300_400"


@dataclass
class PromptBandit:
    """Fixed prompts, K discrete responses each, and a frozen reward table."""

    n_prompts: int = 6
    n_responses: int = 10
    group_size: int = 4
    reward_seed: int = 0
    reward_table: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = named_stream(self.reward_seed, "reward-table")
        table = rng.normal(size=(self.n_prompts, self.n_responses))
        table.setflags(write=False)
        self.reward_table = table

    def exact_mean_reward(self, policy) -> float:
        """Prompt-averaged expected reward under the policy, no sampling."""
        probs = policy.all_probs()
        return float(np.mean(np.sum(probs * self.reward_table, axis=1)))


@dataclass(frozen=True)
class AlignConfig:
    algorithm: str = "rgpo_dual"
    beta_ref: float = 0.05
    gate: GateSpec = field(default_factory=lambda: GateSpec("sigmoid", k=5.0))
    iterations: int = 400
    batch_prompts: int = 4
    learning_rate: float = 1e-2
    inner_steps: int = 1        # gradient steps per sampled batch (epoch analogue)
    eps_clip: float = 0.2
    beta0: float = 0.5
    target_kl: float = 0.02
    n_prompts: int = 6
    n_responses: int = 10
    group_size: int = 4
    reward_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALIGN_ALGORITHMS:
            raise ValueError(f"unknown alignment algorithm {self.algorithm!r}")
        if self.beta_ref < 0:
            raise ValueError("beta_ref must be nonnegative")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")


@dataclass
class AlignBatch:
    """One iteration's sampled prompt/response pairs with group advantages."""

    prompt_ids: np.ndarray      # (B * group_size,)
    response_ids: np.ndarray    # (B * group_size,)
    advantages: np.ndarray      # (B * group_size,)
    kl_prompt_ids: np.ndarray   # (B,) prompts entering the exact KL penalty


def sample_align_batch(bandit: PromptBandit, policy_old, batch_prompts: int,
                       rng: np.random.Generator) -> AlignBatch:
    replace = batch_prompts > bandit.n_prompts
    prompts = rng.choice(bandit.n_prompts, size=batch_prompts, replace=replace)
    prompt_ids, response_ids, reward_groups = [], [], []
    for p in prompts:
        responses = [policy_old.sample(int(p), rng) for _ in range(bandit.group_size)]
        prompt_ids.extend([int(p)] * bandit.group_size)
        response_ids.extend(responses)
        reward_groups.append([bandit.reward_table[int(p), r] for r in responses])
    advantages = np.concatenate(group_relative_advantage(reward_groups))
    return AlignBatch(prompt_ids=np.asarray(prompt_ids, dtype=np.int64),
                      response_ids=np.asarray(response_ids, dtype=np.int64),
                      advantages=advantages,
                      kl_prompt_ids=np.asarray(prompts, dtype=np.int64))


# --- losses -----------------------------------------------------------------

def _ref_kl_node(policy, theta: dc.Node, snapshot_ref, prompt_ids: np.ndarray) -> dc.Node:
    """Differentiable mean over prompts of exact KL(pi(.|p) || pi_ref(.|p))."""
    tape = theta.tape
    table = dc.reshape(theta, (policy.n_states, policy.n_actions))
    rows = dc.gather_rows(table, prompt_ids)
    logp = dc.add_colvec(rows, dc.neg(dc.logsumexp_rows(rows)))
    ref_logits = snapshot_ref.logits_np(prompt_ids)
    ref_logp = ref_logits - logsumexp(ref_logits, axis=1, keepdims=True)
    diff = dc.sub(logp, tape.const(ref_logp))
    return dc.mean(dc.sum_rows(dc.mul(dc.exp(logp), diff)))


@dataclass
class AlignLossEval:
    loss: float
    grad: np.ndarray
    kl_hat: float


def _finish(tape, theta, loss_node, ratio_node) -> AlignLossEval:
    tape.set_output(loss_node)
    loss = float(dc.forward(tape, []))
    grad = dc.grad(tape, [theta])[0]
    r = tape.value(ratio_node)
    return AlignLossEval(loss=loss, grad=grad,
                         kl_hat=float(np.mean(r - 1.0 - np.log(r))))


def _ratio(tape, policy, theta, batch: AlignBatch, snapshot) -> dc.Node:
    logp = policy.build_log_prob(theta, batch.prompt_ids, batch.response_ids)
    old_logp = snapshot.log_probs_np(batch.prompt_ids, batch.response_ids)
    return dc.exp(dc.sub(logp, tape.const(old_logp)))


def dual_gate_loss_eval(batch: AlignBatch, policy, snapshot_old, snapshot_ref,
                        gate: GateSpec, beta: float, beta_ref: float) -> AlignLossEval:
    """-(mean g(r_old) A) + beta kl_hat(r_old) + beta_ref KL(pi || pi_ref)."""
    tape = dc.Tape()
    theta = tape.param(policy.params)
    ratio = _ratio(tape, policy, theta, batch, snapshot_old)
    surrogate = dc.mean(dc.mul(gate_node(gate, ratio), tape.const(batch.advantages)))
    loss = dc.add(dc.neg(surrogate), dc.scale(kl_hat_node(ratio), beta))
    if beta_ref != 0.0:
        loss = dc.add(loss, dc.scale(
            _ref_kl_node(policy, theta, snapshot_ref, batch.kl_prompt_ids), beta_ref))
    return _finish(tape, theta, loss, ratio)


def maxratio_gate_loss_eval(batch: AlignBatch, policy, snapshot_old, snapshot_ref,
                            gate: GateSpec, beta: float, beta_ref: float) -> AlignLossEval:
    """As dual_gate_loss but the gate sees max(r_old, r_ref); KL terms unchanged."""
    tape = dc.Tape()
    theta = tape.param(policy.params)
    ratio_old = _ratio(tape, policy, theta, batch, snapshot_old)
    ratio_ref = _ratio(tape, policy, theta, batch, snapshot_ref)
    gated = gate_node(gate, dc.maximum(ratio_old, ratio_ref))
    surrogate = dc.mean(dc.mul(gated, tape.const(batch.advantages)))
    loss = dc.add(dc.neg(surrogate), dc.scale(kl_hat_node(ratio_old), beta))
    if beta_ref != 0.0:
        loss = dc.add(loss, dc.scale(
            _ref_kl_node(policy, theta, snapshot_ref, batch.kl_prompt_ids), beta_ref))
    return _finish(tape, theta, loss, ratio_old)


def clip_loss_eval(batch: AlignBatch, policy, snapshot_old, snapshot_ref,
                   eps_clip: float, beta_ref: float) -> AlignLossEval:
    """Clipped surrogate, with the reference penalty when beta_ref > 0
    (PPO-RLHF) and without it (GRPO)."""
    tape = dc.Tape()
    theta = tape.param(policy.params)
    ratio = _ratio(tape, policy, theta, batch, snapshot_old)
    adv = tape.const(batch.advantages)
    clipped = dc.mul(dc.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip), adv)
    loss = dc.neg(dc.mean(dc.minimum(dc.mul(ratio, adv), clipped)))
    if beta_ref != 0.0:
        loss = dc.add(loss, dc.scale(
            _ref_kl_node(policy, theta, snapshot_ref, batch.kl_prompt_ids), beta_ref))
    return _finish(tape, theta, loss, ratio)


def dual_gate_loss(batch, policy, snapshot_old, snapshot_ref, gate, beta, beta_ref) -> float:
    return dual_gate_loss_eval(batch, policy, snapshot_old, snapshot_ref,
                               gate, beta, beta_ref).loss


def maxratio_gate_loss(batch, policy, snapshot_old, snapshot_ref, gate, beta,
                       beta_ref) -> float:
    return maxratio_gate_loss_eval(batch, policy, snapshot_old, snapshot_ref,
                                   gate, beta, beta_ref).loss


# --- the alignment loop -----------------------------------------------------------

@dataclass
class AlignRow:
    iteration: int
    mean_reward: float
    kl_ref: float
    kl_old: float
    beta: float


@dataclass
class AlignResult:
    rows: list[AlignRow]
    summary: dict
    config: AlignConfig
    final_policy: CategoricalPolicy


def _mean_kl(policy, other, n_prompts: int) -> float:
    return float(np.mean([policy.kl_exact(other, p) for p in range(n_prompts)]))


def run_alignment(config: AlignConfig, out_path=None) -> AlignResult:
    """Train on the bandit; rows hold exact metrics after 0..iterations
    updates, followed by a convergence-window summary (last quarter)."""
    bandit = PromptBandit(n_prompts=config.n_prompts, n_responses=config.n_responses,
                          group_size=config.group_size, reward_seed=config.reward_seed)
    policy = CategoricalPolicy.tabular(config.n_prompts, config.n_responses)
    ref = policy.snapshot()
    ctrl = BetaController(beta=config.beta0, target_kl=config.target_kl)
    rng = named_stream(config.seed, "alignment")

    def metrics_row(iteration: int, old: PolicySnapshot) -> AlignRow:
        return AlignRow(iteration=iteration,
                        mean_reward=bandit.exact_mean_reward(policy),
                        kl_ref=_mean_kl(policy, ref, config.n_prompts),
                        kl_old=_mean_kl(policy, old, config.n_prompts),
                        beta=ctrl.beta)

    rows = [metrics_row(0, ref)]
    for it in range(1, config.iterations + 1):
        old = policy.snapshot()
        batch = sample_align_batch(bandit, old, config.batch_prompts, rng)
        inner_kls = []
        for _ in range(config.inner_steps):
            if config.algorithm == "rgpo_dual":
                res = dual_gate_loss_eval(batch, policy, old, ref, config.gate,
                                          ctrl.beta, config.beta_ref)
            elif config.algorithm == "rgpo_maxratio":
                res = maxratio_gate_loss_eval(batch, policy, old, ref, config.gate,
                                              ctrl.beta, config.beta_ref)
            elif config.algorithm == "ppo_rlhf":
                res = clip_loss_eval(batch, policy, old, ref, config.eps_clip,
                                     config.beta_ref)
            else:  # grpo: no reference anchor
                res = clip_loss_eval(batch, policy, old, ref, config.eps_clip, 0.0)
            policy.params = policy.params - config.learning_rate * res.grad
            inner_kls.append(res.kl_hat)
        ctrl = beta_update(ctrl, float(np.mean(inner_kls)))
        rows.append(metrics_row(it, old))

    lo = (3 * config.iterations) // 4
    window = [r for r in rows if r.iteration >= lo]
    summary = {
        "tag": SUMMARY_TAG,
        "mean_reward": float(np.mean([r.mean_reward for r in window])),
        "kl_ref": float(np.mean([r.kl_ref for r in window])),
        "kl_old": float(np.mean([r.kl_old for r in window])),
        "beta": float(np.mean([r.beta for r in window])),
    }
    result = AlignResult(rows=rows, summary=summary, config=config,
                         final_policy=policy)
    if out_path is not None:
        write_alignment_csv(out_path, result)
    return result


def write_alignment_csv(path, result: AlignResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mean_reward", "kl_ref", "kl_old", "beta"])
        for r in result.rows:
            writer.writerow([r.iteration, repr(r.mean_reward), repr(r.kl_ref),
                             repr(r.kl_old), repr(r.beta)])
        s = result.summary
        writer.writerow([s["tag"], repr(s["mean_reward"]), repr(s["kl_ref"]),
                         repr(s["kl_old"]), repr(s["beta"])])


def kl_ref_slope(rows: list[AlignRow]) -> float:
    """Least-squares slope of kl_ref over the iteration index."""
    x = np.array([r.iteration for r in rows], dtype=np.float64)
    y = np.array([r.kl_ref for r in rows])
    x = x - x.mean()
    return float((x @ (y - y.mean())) / (x @ x))
