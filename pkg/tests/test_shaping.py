import numpy as np
import pytest
from hypothesis import given, strategies as st

from slope_lab.errors import ContractError, DivergenceError
from slope_lab.mdp import GridWorldSpec, build_gridworld, greedy_sets, random_mdp, value_iteration
from slope_lab.shaping import (BootstrappedPotential, EntropyPotential, NoPotential, SimilarityPotential,
                               SmoothingKernel, StaticPotential, check_policy_invariance,
                               discounted_shaped_return, eta_bound, gaussian_smooth_rewards,
                               lipschitz_bound, lipschitz_estimate, max_nonexpansion_violation,
                               potential_table, potential_value, reshaped_backup, reshaped_trace,
                               reshaped_value_iteration, shaped_landscape, shaped_reward,
                               shaped_reward_table, shaping_term)


def test_eta_bound_values():
    assert eta_bound(0.95) == pytest.approx(0.05 / 1.95)
    assert lipschitz_bound(0.95, eta_bound(0.95)) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        eta_bound(1.0)


@given(st.integers(0, 10_000), st.floats(0.5, 0.95), st.floats(0.0, 0.9))
def test_reshaped_fixed_point_closed_form(seed, gamma, frac):
    # with phi = eta * V the fixed point is V*/(1+eta), Q* - eta V*/(1+eta)
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 8, 3, gamma)
    eta = frac * eta_bound(gamma)
    V, Q, _ = value_iteration(mdp, tol=1e-13)
    res = reshaped_value_iteration(mdp, eta, tol=1e-10, trace=False)
    assert res.in_contraction_regime
    np.testing.assert_allclose(res.Q.max(axis=1), V / (1 + eta), atol=1e-8)
    np.testing.assert_allclose(res.Q, Q - (eta * V / (1 + eta))[:, None], atol=1e-8)
    assert greedy_sets(res.Q, 1e-7) == greedy_sets(Q, 1e-7)


@given(st.integers(0, 10_000), st.floats(0.3, 0.95), st.floats(0.0, 1.0))
def test_lipschitz_estimate_below_bound(seed, gamma, frac):
    mdp = random_mdp(np.random.default_rng(seed), 6, 3, gamma, sparse=False)
    eta = frac * eta_bound(gamma)
    assert lipschitz_estimate(mdp, eta, 200, rng_seed=seed) <= lipschitz_bound(gamma, eta) + 1e-9


def test_backup_matches_definition():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng, 5, 2, 0.9)
    Q = rng.normal(size=(5, 2))
    V = Q.max(axis=1)
    eta = 0.3
    expect = mdp.reward + 0.9 * mdp.transition @ (eta * V) - eta * V[:, None] + 0.9 * mdp.transition @ V
    np.testing.assert_allclose(reshaped_backup(mdp, Q, eta), expect, atol=1e-13)


def test_outside_regime_diverges_with_trace():
    mdp = build_gridworld(GridWorldSpec(5, 5, goal=(4, 4), start=(0, 0), gamma=0.95))
    with pytest.raises(DivergenceError) as info:
        reshaped_value_iteration(mdp, 1.0, max_iter=5000)
    assert len(info.value.trace) > 1


def test_reshaped_trace_step_validation():
    mdp = random_mdp(np.random.default_rng(0), 4, 2, 0.9)
    for bad in (0.0, -0.5, 1.5):
        with pytest.raises(ContractError):
            reshaped_trace(mdp, 0.1, 3, step=bad)
    hist, overflow = reshaped_trace(mdp, 0.01, 4)
    assert len(hist) == 5 and not overflow
    np.testing.assert_array_equal(hist[1], reshaped_backup(mdp, hist[0], 0.01))


def test_damped_trace_is_convex_step():
    mdp = random_mdp(np.random.default_rng(2), 4, 2, 0.9)
    hist, _ = reshaped_trace(mdp, 0.5, 2, step=0.25)
    TQ = reshaped_backup(mdp, hist[1], 0.5)
    np.testing.assert_allclose(hist[2], hist[1] + 0.25 * (TQ - hist[1]), atol=1e-14)


@given(st.integers(0, 10_000))
def test_max_is_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    Q1 = rng.normal(size=(7, 4)) * 10
    Q2 = Q1 + rng.normal(size=(7, 4)) * 10.0 ** rng.uniform(-8, 1)
    assert max_nonexpansion_violation(Q1, Q2) <= 0.0


@given(st.integers(0, 10_000), st.integers(1, 30), st.floats(0.0, 0.99))
def test_shaped_return_telescopes(seed, T, gamma):
    rng = np.random.default_rng(seed)
    states = rng.integers(0, 10, T + 1)
    rewards = rng.normal(size=T)
    phi = rng.normal(size=10) * 3
    shaped = discounted_shaped_return(rewards, states[:-1], states[1:], phi, gamma)
    plain = sum(gamma ** t * rewards[t] for t in range(T))
    assert shaped == pytest.approx(plain + gamma ** T * phi[states[-1]] - phi[states[0]], abs=1e-9)


def test_shaped_return_terminal_drops_final_potential():
    phi = np.array([2.0, 5.0])
    out = discounted_shaped_return([1.0], [0], [1], phi, 0.9, dones=[True])
    assert out == pytest.approx(1.0 - 2.0)


def test_policy_invariance_static():
    rng = np.random.default_rng(4)
    for _ in range(10):
        mdp = random_mdp(rng, 10, 3, 0.9)
        rep = check_policy_invariance(mdp, StaticPotential(rng.uniform(-5, 5, 10)))
        assert rep.passed and rep.max_q_residual < 1e-8


def test_non_potential_bonus_changes_policy():
    # negative control: an action bonus that is not a potential difference
    mdp = random_mdp(np.random.default_rng(5), 6, 3, 0.9)
    _, Q, _ = value_iteration(mdp)
    bonus = np.zeros_like(mdp.reward)
    worst = Q.argmin(axis=1)
    bonus[np.arange(6), worst] = 100.0
    _, Qb, _ = value_iteration(mdp.with_reward(mdp.reward + bonus))
    assert greedy_sets(Qb) != greedy_sets(Q)


def test_shaped_reward_scalar_matches_table():
    rng = np.random.default_rng(6)
    mdp = random_mdp(rng, 5, 2, 0.8)
    phi = rng.normal(size=5)
    table = shaped_reward_table(mdp, phi)
    for s in range(5):
        for a in range(2):
            assert shaped_reward(mdp, StaticPotential(phi), None, s, a) == pytest.approx(table[s, a])


def test_landscape_zero_at_fixed_point_interior():
    # with zero reward, V = gamma max E V at the fixed point, so the shaped term vanishes
    spec = GridWorldSpec(4, 4, goal=(3, 3), start=(0, 0), gamma=0.9)
    mdp = build_gridworld(spec)
    eta = 0.5 * eta_bound(0.9)
    res = reshaped_value_iteration(mdp, eta, tol=1e-13)
    land = shaped_landscape(mdp, res.Q, eta)
    interior = [s for s in range(mdp.n_states)
                if s not in mdp.terminal and not mdp.reward[s].any()]
    assert len(interior) > 10
    np.testing.assert_allclose(land[interior], 0.0, atol=1e-10)
    near_goal = [s for s in range(mdp.n_states) if mdp.reward[s].any()]
    assert np.all(land[near_goal] > 0.5)


def test_potentials():
    Q = np.array([[1.0, 3.0], [0.0, 0.0]])
    np.testing.assert_array_equal(potential_table(NoPotential(), n_states=3), np.zeros(3))
    np.testing.assert_allclose(potential_table(BootstrappedPotential(0.5), Q), [1.5, 0.0])
    ent = potential_table(EntropyPotential(), Q)
    assert ent[1] == pytest.approx(np.log(2))
    p = np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum()
    assert ent[0] == pytest.approx(-(p * np.log(p)).sum())
    feats = np.array([[0.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    sim = SimilarityPotential(feats, bandwidth=2.0)
    np.testing.assert_allclose(potential_table(sim, np.array([0])), [0.0, 0.25, 2.0])
    np.testing.assert_array_equal(potential_table(sim), np.zeros(3))
    assert potential_value(sim, np.array([0, 2]), 2) == 0.0
    with pytest.raises(ContractError):
        potential_table(BootstrappedPotential(), None)
    with pytest.raises(ContractError):
        BootstrappedPotential(-1.0)
    with pytest.raises(ContractError):
        StaticPotential(np.array([np.nan]))


def test_shaping_term_terminal():
    pot = StaticPotential(np.array([1.0, 4.0]))
    assert shaping_term(pot, 0.9, 0, 1) == pytest.approx(0.9 * 4.0 - 1.0)
    assert shaping_term(pot, 0.9, 0, 1, done=True) == pytest.approx(-1.0)


@given(st.lists(st.floats(-100, 100), min_size=0, max_size=120), st.floats(0.5, 12.0))
def test_smoothing_preserves_sum(rewards, sigma):
    r = np.array(rewards)
    out = gaussian_smooth_rewards(r, sigma)
    assert out.shape == r.shape
    assert abs(out.sum() - r.sum()) < 1e-9 * max(1.0, np.abs(r).sum())


@given(st.integers(0, 10_000), st.integers(1, 80), st.floats(0.5, 10.0))
def test_smoothing_matches_direct_scatter(seed, n, sigma):
    r = np.random.default_rng(seed).normal(size=n)
    kern = SmoothingKernel.gaussian(sigma)
    L, w = kern.half_window, kern.weights
    out = np.zeros(n)
    for j in range(n):
        idx = [t for t in range(j - L, j + L + 1) if 0 <= t < n]
        ws = np.array([w[t - j + L] for t in idx])
        out[idx] += r[j] * ws / ws.sum()
    np.testing.assert_allclose(gaussian_smooth_rewards(r, sigma), out, atol=1e-12)


def test_smoothing_kernel_validation():
    k = SmoothingKernel.gaussian(8.0)
    assert k.half_window == 24 and k.weights.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k.weights, k.weights[::-1])
    with pytest.raises(ContractError):
        SmoothingKernel.gaussian(0.0)
