import math

import numpy as np
import pytest

from rgpo import diffcore as dc
from rgpo.gatebank import GateSpec
from rgpo.policy import CategoricalPolicy
from rgpo.prefalign import (AlignBatch, AlignConfig, PromptBandit,
                            clip_loss_eval, dual_gate_loss, dual_gate_loss_eval,
                            kl_ref_slope, maxratio_gate_loss,
                            maxratio_gate_loss_eval, run_alignment,
                            sample_align_batch, write_alignment_csv)

GATE = GateSpec("sigmoid", k=5.0)


def tabular_with_logits(logits):
    logits = np.asarray(logits, dtype=np.float64)
    p = CategoricalPolicy.tabular(*logits.shape)
    p.params = logits.ravel().copy()
    return p


def make_batch(rng, n_prompts=4, n_responses=6, size=12):
    prompts = rng.integers(0, n_prompts, size=size)
    responses = rng.integers(0, n_responses, size=size)
    adv = rng.normal(size=size)
    return AlignBatch(prompt_ids=prompts, response_ids=responses, advantages=adv,
                      kl_prompt_ids=np.unique(prompts))


def test_bandit_reward_table_frozen():
    bandit = PromptBandit(n_prompts=3, n_responses=4, reward_seed=1)
    with pytest.raises(ValueError):
        bandit.reward_table[0, 0] = 99.0
    again = PromptBandit(n_prompts=3, n_responses=4, reward_seed=1)
    np.testing.assert_array_equal(bandit.reward_table, again.reward_table)


def test_exact_mean_reward_uniform():
    bandit = PromptBandit(n_prompts=3, n_responses=4)
    policy = CategoricalPolicy.tabular(3, 4)
    assert bandit.exact_mean_reward(policy) == pytest.approx(
        float(bandit.reward_table.mean()), abs=1e-12)


def test_dual_gate_loss_at_common_point():
    # policy == old == ref: both KL terms vanish and the gate sits at 0.5
    rng = np.random.default_rng(0)
    policy = tabular_with_logits(rng.normal(size=(4, 6)))
    snap = policy.snapshot()
    batch = make_batch(rng)
    loss = dual_gate_loss(batch, policy, snap, snap, GATE, beta=0.7, beta_ref=0.3)
    assert loss == pytest.approx(-0.5 * batch.advantages.mean(), abs=1e-12)


def test_dual_gate_loss_beta_ref_zero_reduces_to_trust_region_form():
    rng = np.random.default_rng(1)
    policy = tabular_with_logits(rng.normal(size=(4, 6)))
    old = tabular_with_logits(rng.normal(size=(4, 6))).snapshot()
    ref = tabular_with_logits(rng.normal(size=(4, 6))).snapshot()
    batch = make_batch(rng)
    res = dual_gate_loss_eval(batch, policy, old, ref, GATE, beta=0.4, beta_ref=0.0)
    # manual: -(mean g(r) A) + beta * kl_hat(r)
    logp = policy.log_probs_np(batch.prompt_ids, batch.response_ids)
    r = np.exp(logp - old.log_probs_np(batch.prompt_ids, batch.response_ids))
    from rgpo.gatebank import gate_value
    from rgpo.trustctl import kl_hat
    expected = -(np.asarray(gate_value(GATE, r)) * batch.advantages).mean() \
        + 0.4 * kl_hat(r)
    assert res.loss == pytest.approx(expected, abs=1e-12)


def test_dual_gate_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    policy = tabular_with_logits(rng.normal(size=(3, 5)))
    old = tabular_with_logits(rng.normal(size=(3, 5))).snapshot()
    ref = tabular_with_logits(rng.normal(size=(3, 5))).snapshot()
    batch = make_batch(rng, n_prompts=3, n_responses=5, size=8)
    res = dual_gate_loss_eval(batch, policy, old, ref, GATE, beta=0.5, beta_ref=0.4)

    step = 1e-6
    fd = np.zeros_like(policy.params)
    for i in range(policy.params.size):
        for sgn in (+1, -1):
            probe = tabular_with_logits(policy.params.reshape(3, 5))
            probe.params[i] += sgn * step
            val = dual_gate_loss(batch, probe, old, ref, GATE, 0.5, 0.4)
            fd[i] += sgn * val / (2 * step)
    np.testing.assert_allclose(res.grad, fd, atol=1e-5)


def test_maxratio_equals_dual_when_ref_is_old():
    rng = np.random.default_rng(3)
    policy = tabular_with_logits(rng.normal(size=(4, 6)))
    old = tabular_with_logits(rng.normal(size=(4, 6))).snapshot()
    batch = make_batch(rng)
    a = dual_gate_loss(batch, policy, old, old, GATE, 0.5, 0.2)
    b = maxratio_gate_loss(batch, policy, old, old, GATE, 0.5, 0.2)
    assert a == pytest.approx(b, abs=1e-14)


def test_maxratio_selects_larger_ratio():
    # pi/pi_ref = 3 while pi/pi_old = 1: the gate must see 3
    policy = tabular_with_logits([[math.log(0.6), math.log(0.4)]])
    old = policy.snapshot()
    ref = tabular_with_logits([[math.log(0.2), math.log(0.8)]]).snapshot()
    batch = AlignBatch(prompt_ids=np.array([0]), response_ids=np.array([0]),
                       advantages=np.array([1.0]), kl_prompt_ids=np.array([0]))
    res = maxratio_gate_loss_eval(batch, policy, old, ref, GATE, beta=0.0, beta_ref=0.0)
    from rgpo.gatebank import gate_value
    assert res.loss == pytest.approx(-gate_value(GATE, 3.0), rel=1e-12)


def test_maxratio_equals_dual_when_old_ratio_dominates():
    rng = np.random.default_rng(4)
    policy = tabular_with_logits(rng.normal(size=(2, 3)))
    batch = make_batch(rng, n_prompts=2, n_responses=3, size=6)
    # old policy assigns less mass to every sampled pair, so r_old > 1;
    # the reference is the policy itself, so r_ref == 1 < r_old elementwise
    old_logits = policy.params.reshape(2, 3).copy()
    for p, a in zip(batch.prompt_ids, batch.response_ids):
        old_logits[p, a] = policy.params.reshape(2, 3)[p, a] - 0.5
    old = tabular_with_logits(old_logits).snapshot()
    ref = policy.snapshot()
    a = dual_gate_loss(batch, policy, old, ref, GATE, 0.3, 0.1)
    b = maxratio_gate_loss(batch, policy, old, ref, GATE, 0.3, 0.1)
    logp = policy.log_probs_np(batch.prompt_ids, batch.response_ids)
    r_old = np.exp(logp - old.log_probs_np(batch.prompt_ids, batch.response_ids))
    r_ref = np.exp(logp - ref.log_probs_np(batch.prompt_ids, batch.response_ids))
    assert np.all(r_old >= r_ref)
    assert a == pytest.approx(b, abs=1e-14)


def test_clip_loss_reference_penalty_toggle():
    rng = np.random.default_rng(5)
    policy = tabular_with_logits(rng.normal(size=(4, 6)))
    old = tabular_with_logits(rng.normal(size=(4, 6))).snapshot()
    ref = tabular_with_logits(rng.normal(size=(4, 6))).snapshot()
    batch = make_batch(rng)
    with_ref = clip_loss_eval(batch, policy, old, ref, 0.2, beta_ref=0.5)
    without = clip_loss_eval(batch, policy, old, ref, 0.2, beta_ref=0.0)
    kl = np.mean([policy.kl_exact(ref, int(p)) for p in batch.kl_prompt_ids])
    assert with_ref.loss - without.loss == pytest.approx(0.5 * kl, rel=1e-10)


def test_sample_align_batch_groups_zero_mean():
    bandit = PromptBandit()
    policy = CategoricalPolicy.tabular(bandit.n_prompts, bandit.n_responses)
    batch = sample_align_batch(bandit, policy.snapshot(), 4, np.random.default_rng(0))
    assert batch.prompt_ids.shape == (16,)
    for g in range(4):
        group = batch.advantages[g * 4:(g + 1) * 4]
        assert abs(group.mean()) < 1e-12


def test_run_alignment_zero_iterations(tmp_path):
    cfg = AlignConfig(iterations=0)
    res = run_alignment(cfg, out_path=tmp_path / "a.csv")
    assert len(res.rows) == 1
    assert res.rows[0].kl_ref == 0.0
    lines = (tmp_path / "a.csv").read_text().strip().splitlines()
    assert lines[0] == "iteration,mean_reward,kl_ref,kl_old,beta"
    assert len(lines) == 3   # header + initial row + summary row
    assert lines[-1].startswith("window_300_400,")


def test_run_alignment_deterministic():
    cfg = AlignConfig(iterations=20, learning_rate=0.5, beta_ref=0.5, seed=4)
    a = run_alignment(cfg)
    b = run_alignment(cfg)
    assert [(r.mean_reward, r.kl_ref, r.kl_old, r.beta) for r in a.rows] == \
           [(r.mean_reward, r.kl_ref, r.kl_old, r.beta) for r in b.rows]


def test_summary_window_matches_rows():
    cfg = AlignConfig(iterations=40, learning_rate=0.5, beta_ref=0.5, seed=1)
    res = run_alignment(cfg)
    window = [r for r in res.rows if r.iteration >= 30]
    assert res.summary["kl_ref"] == pytest.approx(
        np.mean([r.kl_ref for r in window]), abs=1e-12)
    assert res.summary["tag"] == "window_300_400"


def test_grpo_reference_drift_positive_slope():
    for seed in (0, 1, 2):
        cfg = AlignConfig(algorithm="grpo", learning_rate=0.5, iterations=200, seed=seed)
        res = run_alignment(cfg)
        assert kl_ref_slope(res.rows) > 0.0


def test_dual_gate_anchors_below_grpo():
    for seed in (0, 1, 2):
        base = dict(learning_rate=0.5, beta_ref=0.5, iterations=200, seed=seed)
        rgpo = run_alignment(AlignConfig(algorithm="rgpo_dual", **base))
        grpo = run_alignment(AlignConfig(algorithm="grpo", **base))
        assert rgpo.rows[-1].kl_ref < grpo.rows[-1].kl_ref


def test_anchored_kl_ref_bounded_over_training():
    # anchor-effective config: equilibrium before iteration 50
    for seed in (0, 1, 2):
        cfg = AlignConfig(algorithm="rgpo_dual", learning_rate=2.0, beta_ref=1.0,
                          iterations=400, seed=seed)
        res = run_alignment(cfg)
        kl_at_50 = [r.kl_ref for r in res.rows if r.iteration == 50][0]
        assert max(r.kl_ref for r in res.rows) < 2.0 * kl_at_50


@pytest.mark.xfail(reason="matched-reward KL ordering vs ppo_rlhf does not "
                   "transfer to the tabular bandit: with exact reference "
                   "penalties the dual-gate and clip+anchor objectives "
                   "coincide to first order (g'(1) absorbed into the rate), "
                   "so both trace one reward-KL frontier and per-seed "
                   "orderings at matched reward are sub-noise ties; see the "
                   "decisions ledger for the swept configurations",
                   strict=False)
def test_dual_gate_beats_ppo_rlhf_at_matched_reward():
    # matched-rate pair: rgpo at lr/g'(1), ppo at lr, beta_ref shared
    for seed in (0, 1, 2):
        rgpo = run_alignment(AlignConfig(algorithm="rgpo_dual", learning_rate=0.25,
                                         beta_ref=0.5, iterations=400, seed=seed))
        ppo = run_alignment(AlignConfig(algorithm="ppo_rlhf", learning_rate=0.5,
                                        beta_ref=0.5, iterations=400, seed=seed))
        assert abs(rgpo.rows[-1].mean_reward - ppo.rows[-1].mean_reward) < 0.06
        assert rgpo.rows[-1].kl_ref < ppo.rows[-1].kl_ref


def test_alignment_csv_roundtrip(tmp_path):
    cfg = AlignConfig(iterations=5, seed=2)
    res = run_alignment(cfg, out_path=tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 6 + 1
    first = lines[1].split(",")
    assert first[0] == "0"
    assert float(first[2]) == res.rows[0].kl_ref


def test_align_config_validation():
    with pytest.raises(ValueError):
        AlignConfig(algorithm="dpo")
    with pytest.raises(ValueError):
        AlignConfig(beta_ref=-0.1)
    with pytest.raises(ValueError):
        AlignConfig(group_size=1)
