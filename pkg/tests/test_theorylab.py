import math

import numpy as np
import pytest

from rgpo import policy as pol
from rgpo.envlab import random_mdp, occupancy, solve_exact
from rgpo.gatebank import GateSpec, weight_supremum
from rgpo.streams import named_stream
from rgpo.theorylab import (BoundReport, check_bias_bound, check_heavy_tail,
                            check_improvement_bound, check_reinforce_limit,
                            check_variance_bound, max_state_kl, write_reports)


def tabular_with_logits(logits):
    logits = np.asarray(logits, dtype=np.float64)
    p = pol.CategoricalPolicy.tabular(*logits.shape)
    p.params = logits.ravel().copy()
    return p


def test_bound_report_pass_logic():
    assert BoundReport("x", lhs=1.0, rhs=1.5).passed
    assert BoundReport("x", lhs=1.0, rhs=1.0).passed
    assert not BoundReport("x", lhs=1.0, rhs=0.5).passed


def test_write_reports(tmp_path):
    reports = [BoundReport("a", 0.5, 1.0), BoundReport("b", 2.0, 1.0)]
    path = tmp_path / "r.csv"
    write_reports(path, reports)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "trial_id,lhs,rhs,slack,pass"
    assert lines[1].endswith(",1") and lines[2].endswith(",0")


# --- bias bound -------------------------------------------------------------

def test_bias_bound_identity_gate_zero_lhs():
    rng = np.random.default_rng(0)
    mdp = random_mdp(4, 3, 0.9, rng)
    policy = tabular_with_logits(rng.normal(size=(4, 3)))
    old = tabular_with_logits(rng.normal(size=(4, 3))).snapshot()
    rep = check_bias_bound(mdp, policy, old, GateSpec("identity_is"))
    assert rep.lhs == pytest.approx(0.0, abs=1e-14)   # w(r) = r: no bias
    assert rep.passed


def test_bias_bound_on_policy_case():
    rng = np.random.default_rng(1)
    mdp = random_mdp(4, 2, 0.9, rng)
    policy = tabular_with_logits(rng.normal(size=(4, 2)))
    snap = policy.snapshot()
    gate = GateSpec("sigmoid", k=5.0)
    rep = check_bias_bound(mdp, policy, snap, gate)
    # at r == 1: lhs = |g'(1) - 1| * |grad J|; the bound holds with slack
    sol = solve_exact(mdp, snap)
    d = occupancy(mdp, snap, normalized=True)
    joint = d[:, None] * policy.all_probs()
    from rgpo.theorylab import _score_table
    grad_j = np.einsum("sa,sat->t", joint * sol.A, _score_table(policy))
    assert rep.lhs == pytest.approx(abs(1.25 - 1.0) * np.linalg.norm(grad_j), rel=1e-10)
    assert rep.passed


@pytest.mark.parametrize("k", [2.0, 5.0, 20.0])
def test_bias_bound_random_instances(k):
    rng = named_stream(123, f"bias-{k}")
    gate = GateSpec("sigmoid", k=k)
    for _ in range(20):
        n_s = int(rng.integers(2, 7))
        n_a = int(rng.integers(2, 5))
        mdp = random_mdp(n_s, n_a, float(rng.uniform(0.5, 0.95)), rng)
        policy = tabular_with_logits(rng.normal(size=(n_s, n_a)))
        old = tabular_with_logits(rng.normal(size=(n_s, n_a))).snapshot()
        rep = check_bias_bound(mdp, policy, old, gate)
        assert rep.passed, rep


# --- variance bound -----------------------------------------------------------

def test_variance_bound_temperature_gate():
    gate = GateSpec("temperature", beta_temp=1.0)
    rep = check_variance_bound(gate, alpha_tail=1.5, n=200_000,
                               rng=np.random.default_rng(2))
    assert rep.meta["c"] <= 0.25
    assert rep.rhs <= 0.25 ** 2 / 3.0 + 3.0 * 1.0  # sanity on the bound scale
    assert rep.passed


def test_variance_bound_degenerate():
    # z constant 0 via a trivial check: w bounded so var(y) tiny under tiny z
    gate = GateSpec("sigmoid", k=5.0)
    rep = check_variance_bound(gate, alpha_tail=3.0, n=10_000,
                               rng=np.random.default_rng(3))
    assert rep.passed
    assert rep.lhs < rep.meta["c"] ** 2 / 3.0


def test_variance_bound_sigmoid_heavy_tail():
    gate = GateSpec("sigmoid", k=5.0)
    rep = check_variance_bound(gate, alpha_tail=1.5, n=1_000_000,
                               rng=np.random.default_rng(4))
    assert rep.passed


# --- heavy tail -----------------------------------------------------------------

def test_heavy_tail_divergence_and_stability():
    gate = GateSpec("sigmoid", k=5.0)
    rep = check_heavy_tail(1.5, [10**3, 10**4, 10**5, 10**6], gate,
                           rng=named_stream(7, "heavy-tail"))
    assert rep.x_diverges(10.0)
    assert rep.y_stable(0.10)


def test_heavy_tail_control_alpha3():
    gate = GateSpec("sigmoid", k=5.0)
    rep = check_heavy_tail(3.0, [10**3, 10**4, 10**5, 10**6], gate,
                           rng=named_stream(7, "heavy-tail-control"))
    assert rep.x_stable(0.15)
    assert rep.y_stable(0.10)


def test_heavy_tail_reproducible():
    gate = GateSpec("temperature", beta_temp=1.0)
    a = check_heavy_tail(1.5, [1000, 10000], gate, rng=named_stream(9, "ht"))
    b = check_heavy_tail(1.5, [1000, 10000], gate, rng=named_stream(9, "ht"))
    assert a.var_x == b.var_x and a.var_y == b.var_y


# --- improvement bound ------------------------------------------------------------

def test_improvement_bound_at_theta_old():
    rng = np.random.default_rng(5)
    mdp = random_mdp(4, 3, 0.9, rng)
    old = tabular_with_logits(rng.normal(size=(4, 3)))
    rep = check_improvement_bound(mdp, old, perturbation_scale=0.0,
                                  gate=GateSpec("sigmoid", k=5.0), delta=0.01,
                                  rng=np.random.default_rng(6))
    # J_new == J_old and the surrogate vanishes (own advantages have zero
    # occupancy mean), so the slack is exactly C * sqrt(delta)
    assert rep.meta["surrogate"] == pytest.approx(0.0, abs=1e-12)
    assert rep.slack == pytest.approx(rep.meta["C"] * math.sqrt(0.01), abs=1e-10)
    assert rep.passed


def test_improvement_bound_identity_gate_small_delta():
    rng = np.random.default_rng(8)
    mdp = random_mdp(4, 2, 0.9, rng)
    old = tabular_with_logits(rng.normal(size=(4, 2)))
    for delta in (1e-3, 1e-5):
        rep = check_improvement_bound(mdp, old, perturbation_scale=0.5,
                                      gate=GateSpec("identity_is"), delta=delta,
                                      rng=np.random.default_rng(9))
        # identity gate: surrogate equals the exact normalized improvement
        assert rep.rhs - rep.meta["surrogate"] - (1 - mdp.gamma) * solve_exact(mdp, old).J \
            == pytest.approx(0.0, abs=1e-10)
        assert rep.slack == pytest.approx(rep.meta["C"] * math.sqrt(delta), abs=1e-9)


def test_improvement_bound_random_perturbations():
    rng = named_stream(11, "improvement")
    gate = GateSpec("sigmoid", k=5.0)
    mdp = random_mdp(4, 3, 0.9, rng)
    old = tabular_with_logits(rng.normal(size=(4, 3)))
    for _ in range(40):
        rep = check_improvement_bound(mdp, old, perturbation_scale=1.0,
                                      gate=gate, delta=0.01, rng=rng)
        assert rep.passed, rep
        assert rep.meta["kl"] <= 0.01 + 1e-12


def test_improvement_bound_rescale_failure():
    rng = np.random.default_rng(12)
    mdp = random_mdp(3, 2, 0.9, rng)
    old = tabular_with_logits(rng.normal(size=(3, 2)))
    with pytest.raises(RuntimeError):
        check_improvement_bound(mdp, old, perturbation_scale=1e9,
                                gate=GateSpec("sigmoid"), delta=1e-12,
                                rng=np.random.default_rng(0), max_rescales=2)


# --- on-policy limit ---------------------------------------------------------------

@pytest.mark.parametrize("gate,scale", [
    (GateSpec("sigmoid", k=5.0), 1.25),
    (GateSpec("temperature", beta_temp=1.0), 0.25),
    (GateSpec("clipped_linear", c=2.0), 1.0),
])
def test_reinforce_limit_scales(gate, scale):
    rng = np.random.default_rng(13)
    policy = tabular_with_logits(rng.normal(size=(5, 3)))
    states = rng.integers(0, 5, size=32)
    actions = rng.integers(0, 3, size=32)
    adv = rng.normal(size=32)
    rep = check_reinforce_limit(policy, states, actions, adv, gate)
    assert rep.passed                       # deviation below 1e-8
    assert rep.meta["measured_scale"] == pytest.approx(scale, abs=1e-8)


def test_max_state_kl():
    rng = np.random.default_rng(14)
    a = tabular_with_logits(rng.normal(size=(3, 3)))
    b = tabular_with_logits(rng.normal(size=(3, 3))).snapshot()
    direct = max(a.kl_exact(b, s) for s in range(3))
    assert max_state_kl(a, b, 3) == direct
