import math

import numpy as np
import pytest

from rgpo import policy as pol
from rgpo.envlab import (ExactMDP, ParetoSampler, PointMassEnv, episode_return,
                         exact_expectation, occupancy, pd_controller,
                         random_mdp, sample_pareto, solve_exact)


def tabular(logits):
    logits = np.asarray(logits, dtype=np.float64)
    p = pol.CategoricalPolicy.tabular(*logits.shape)
    p.params = logits.ravel().copy()
    return p


def uniform_policy(mdp):
    return pol.CategoricalPolicy.tabular(mdp.n_states, mdp.n_actions)


# --- exact MDP ----------------------------------------------------------------

def test_mdp_validation():
    with pytest.raises(ValueError):
        ExactMDP(transition=np.ones((2, 1, 2)), reward=np.zeros((2, 1)),
                 gamma=0.9, start=np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        random_mdp(3, 2, 1.0, np.random.default_rng(0))


def test_solve_exact_zero_rewards():
    rng = np.random.default_rng(0)
    mdp = random_mdp(4, 2, 0.9, rng)
    mdp.reward[:] = 0.0
    sol = solve_exact(mdp, uniform_policy(mdp))
    assert np.all(sol.V == 0) and np.all(sol.Q == 0) and np.all(sol.A == 0)
    assert sol.J == 0.0


def test_solve_exact_geometric_series():
    mdp = ExactMDP(transition=np.ones((1, 1, 1)), reward=np.ones((1, 1)),
                   gamma=0.9, start=np.array([1.0]))
    sol = solve_exact(mdp, pol.CategoricalPolicy.tabular(1, 1))
    assert sol.V[0] == pytest.approx(10.0, rel=1e-12)
    assert sol.residual < 1e-10


def _mc_q(mdp, policy, s0, a0, n_episodes, horizon, rng):
    """Vectorized Monte-Carlo estimate of Q(s0, a0) with its standard error."""
    probs = policy.all_probs()
    cum_probs = probs.cumsum(axis=1)
    cum_trans = mdp.transition.cumsum(axis=2)
    totals = np.full(n_episodes, mdp.reward[s0, a0])
    states = (rng.random(n_episodes)[:, None] > cum_trans[s0, a0][None, :]).sum(axis=1)
    disc = mdp.gamma
    for _ in range(1, horizon):
        actions = (rng.random(n_episodes)[:, None] > cum_probs[states]).sum(axis=1)
        totals += disc * mdp.reward[states, actions]
        states = (rng.random(n_episodes)[:, None] > cum_trans[states, actions]).sum(axis=1)
        disc *= mdp.gamma
    return totals.mean(), totals.std(ddof=1) / math.sqrt(n_episodes)


def test_solve_exact_matches_monte_carlo_advantage():
    rng = np.random.default_rng(1)
    mdp = random_mdp(4, 2, 0.9, rng)
    policy = tabular(rng.normal(size=(4, 2)))
    sol = solve_exact(mdp, policy)
    probs = policy.all_probs()

    q_hat = np.zeros((4, 2))
    q_se = np.zeros((4, 2))
    for s in range(4):
        for a in range(2):
            q_hat[s, a], q_se[s, a] = _mc_q(mdp, policy, s, a, 3000, 130, rng)

    for s in range(4):
        for a in range(2):
            a_hat = q_hat[s, a] - probs[s] @ q_hat[s]
            # independent per-(s,a) streams: combine standard errors
            coeff = -probs[s].copy()
            coeff[a] += 1.0
            se = math.sqrt(np.sum((coeff * q_se[s]) ** 2))
            tail_bias = mdp.gamma ** 130 / (1 - mdp.gamma)
            assert abs(a_hat - sol.A[s, a]) < 3 * se + tail_bias


def test_performance_difference_identity_exact():
    # (1-gamma) * (J_new - J_old) equals the ratio-weighted advantage sum
    # under the NEW policy's normalized occupancy, to solver precision
    rng = np.random.default_rng(2)
    for _ in range(20):
        mdp = random_mdp(5, 3, 0.85, rng)
        old = tabular(rng.normal(size=(5, 3)))
        new = tabular(old.params.reshape(5, 3) + rng.normal(scale=0.5, size=(5, 3)))
        sol_old = solve_exact(mdp, old)
        sol_new = solve_exact(mdp, new)
        d_new = occupancy(mdp, new, normalized=True)
        ratios = new.all_probs() / old.all_probs()
        surrogate = exact_expectation(mdp, d_new, old, ratios * sol_old.A)
        assert abs((1 - mdp.gamma) * (sol_new.J - sol_old.J) - surrogate) < 1e-8


def test_occupancy_normalization():
    rng = np.random.default_rng(3)
    mdp = random_mdp(6, 2, 0.9, rng)
    policy = uniform_policy(mdp)
    d_norm = occupancy(mdp, policy, normalized=True)
    assert d_norm.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.all(d_norm >= 0)
    d_raw = occupancy(mdp, policy, normalized=False)
    assert d_raw.sum() == pytest.approx(1.0 / (1 - mdp.gamma), rel=1e-10)


def test_own_advantage_has_zero_mean_per_state():
    rng = np.random.default_rng(4)
    mdp = random_mdp(4, 3, 0.9, rng)
    policy = tabular(rng.normal(size=(4, 3)))
    sol = solve_exact(mdp, policy)
    per_state = (policy.all_probs() * sol.A).sum(axis=1)
    np.testing.assert_allclose(per_state, 0.0, atol=1e-10)


# --- point mass -----------------------------------------------------------------

def test_pointmass_reward_at_goal():
    env = PointMassEnv()
    env.reset(np.random.default_rng(0))
    env._pos = np.zeros(2)
    _, reward, _ = env.step(np.zeros(2), np.random.default_rng(1))
    assert reward == 0.0


def test_pointmass_fixed_seed_replay():
    def run():
        env = PointMassEnv()
        rng = np.random.default_rng(42)
        obs = env.reset(rng)
        traj = [obs]
        for _ in range(30):
            obs, reward, done = env.step(pd_controller(obs), rng)
            traj.append(obs)
        return np.array(traj)

    np.testing.assert_array_equal(run(), run())


def test_pointmass_episode_terminates_at_horizon():
    env = PointMassEnv(horizon=7)
    rng = np.random.default_rng(0)
    env.reset(rng)
    flags = [env.step(np.zeros(2), rng)[2] for _ in range(7)]
    assert flags == [False] * 6 + [True]


def test_pointmass_action_clamping_flagged():
    env = PointMassEnv()
    rng = np.random.default_rng(0)
    env.reset(rng)
    env.step(np.array([5.0, 0.0]), rng)
    assert env.clamp_count == 1


def test_pd_controller_beats_random():
    env = PointMassEnv()
    rng = np.random.default_rng(5)
    pd = [episode_return(env, pd_controller, rng) for _ in range(100)]
    rand = [episode_return(env, lambda obs: rng.uniform(-1, 1, 2), rng) for _ in range(100)]
    assert np.mean(pd) > np.mean(rand)


def test_pointmass_state_stays_finite():
    env = PointMassEnv()
    rng = np.random.default_rng(6)
    obs = env.reset(rng)
    for _ in range(200):
        obs, _, done = env.step(np.array([1.0, 1.0]), rng)
        if done:
            obs = env.reset(rng)
    assert np.all(np.isfinite(obs))


# --- pareto sampler -------------------------------------------------------------

def test_pareto_degenerate_tail():
    sampler = ParetoSampler(alpha=1e9)
    r = sample_pareto(sampler, 1000, np.random.default_rng(0))
    np.testing.assert_allclose(r, 1.0, atol=1e-6)
    assert np.all(r >= 1.0)


def test_pareto_second_moment_alpha3():
    sampler = ParetoSampler(alpha=3.0)
    r = sampler.sample(1_000_000, np.random.default_rng(1))
    sq = r * r
    se = sq.std(ddof=1) / math.sqrt(sq.size)
    assert abs(sq.mean() - 3.0) < 3 * se


def test_pareto_divergence_alpha_1_5():
    sampler = ParetoSampler(alpha=1.5)
    rng = np.random.default_rng(2)
    r = sampler.sample(1_000_000, rng)
    m2_small = np.mean(r[:1000] ** 2)
    m2_large = np.mean(r ** 2)
    assert m2_large > 10 * m2_small
    assert sampler.second_moment() == np.inf


def test_pareto_kolmogorov_smirnov():
    sampler = ParetoSampler(alpha=2.0)
    n = 100_000
    r = np.sort(sampler.sample(n, np.random.default_rng(3)))
    grid = np.arange(1, n + 1) / n
    theo = sampler.cdf(r)
    d = max(np.max(np.abs(grid - theo)), np.max(np.abs(grid - 1.0 / n - theo)))
    assert d < 0.01
