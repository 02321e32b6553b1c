"""Numerical property suites.

Each suite returns a plain dict with a ``passed`` flag, the measured
quantities and the runtime, so it can be written as a JSON report or
asserted on directly.
"""
from __future__ import annotations

import time

import numpy as np

from .distval import QceConfig, Support, expectation, qce_fit, qce_loss, two_hot_encode, log_softmax
from .envs import PointMassEnv
from .errors import DivergenceError, NonConvergenceError
from .mdp import random_mdp
from .planner import PlannerConfig, PointMassModel, degeneracy_diagnostic, mppi_plan
from .shaping import (StaticPotential, check_policy_invariance, eta_bound, gaussian_smooth_rewards,
                      lipschitz_bound, lipschitz_estimate, max_nonexpansion_violation,
                      reshaped_value_iteration)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        out["runtime_s"] = time.perf_counter() - t0
        return out
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def theorem_suite(n_mdps=50, seed=0, tol=1e-8, max_states=20, max_actions=5, phi_scale=5.0):
    """Static shaping keeps greedy sets and shifts Q* by -phi."""
    rng = np.random.default_rng(seed)
    worst_q, worst_v, failures = 0.0, 0.0, []
    for i in range(n_mdps):
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(1, max_actions + 1))
        gamma = float(rng.uniform(0.5, 0.99))
        mdp = random_mdp(rng, S, A, gamma, sparse=bool(rng.integers(2)))
        phi = rng.uniform(-phi_scale, phi_scale, size=S)
        rep = check_policy_invariance(mdp, StaticPotential(phi), tol=tol)
        worst_q = max(worst_q, rep.max_q_residual)
        worst_v = max(worst_v, rep.max_v_residual)
        if not rep.passed:
            failures.append({"mdp": i, **rep.to_dict()})
    return {"suite": "theorem", "passed": not failures and worst_q < tol, "n_mdps": n_mdps,
            "max_q_residual": worst_q, "max_v_residual": worst_v, "tol": tol, "failures": failures}


@_timed
def smoothing_suite(n_sequences=1000, sigma=8.0, seed=0, tol=1e-9):
    """Gaussian reward smoothing preserves every sequence's total."""
    rng = np.random.default_rng(seed)
    L = int(round(3 * sigma))
    worst = 0.0
    for i in range(n_sequences):
        n = int(rng.integers(1, 200))
        kind = i % 4
        if kind == 0:
            r = rng.normal(size=n) * 10.0 ** rng.uniform(-3, 3)
        elif kind == 1:  # sparse success at the very end
            r = np.zeros(n)
            r[-1] = 1.0
        elif kind == 2:  # spike at the start
            r = np.zeros(n)
            r[0] = rng.uniform(-5, 5)
        else:  # spikes at both ends plus noise
            r = rng.uniform(-1, 1, size=n) * (rng.random(n) < 0.1)
            r[0], r[-1] = rng.uniform(-5, 5, size=2)
        out = gaussian_smooth_rewards(r, sigma, L)
        worst = max(worst, abs(float(out.sum()) - float(r.sum())))
    return {"suite": "smoothing", "passed": worst < tol, "max_sum_error": worst, "tol": tol,
            "n_sequences": n_sequences, "sigma": sigma, "half_window": L}


@_timed
def contraction_suite(n_pairs=20, n_trials=1000, tol=1e-10, seed=0, n_states=12, n_actions=3, extra=()):
    """Empirical Lipschitz constant of the reshaped backup against its bound,
    and agreement of fixed points reached from two random starts.

    ``extra`` holds additional ``(gamma, eta)`` pairs; those at or beyond the
    contraction bound are reported as outside the regime and not asserted.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        gamma = float(rng.uniform(0.5, 0.95))
        pairs.append((gamma, float(rng.uniform(0.0, 0.95) * eta_bound(gamma))))
    pairs += [(float(g), float(e)) for g, e in extra]
    rows, passed = [], True
    for i, (gamma, eta) in enumerate(pairs):
        mdp = random_mdp(rng, n_states, n_actions, gamma, sparse=False)
        row = {"gamma": gamma, "eta": eta, "bound": lipschitz_bound(gamma, eta)}
        if eta >= eta_bound(gamma):
            row["status"] = "outside contraction regime"
            row["lipschitz_estimate"] = lipschitz_estimate(mdp, eta, n_trials, rng_seed=seed + i)
            rows.append(row)
            continue
        est = lipschitz_estimate(mdp, eta, n_trials, rng_seed=seed + i)
        Q1 = rng.normal(size=mdp.reward.shape) * 10.0
        Q2 = rng.normal(size=mdp.reward.shape) * 10.0
        try:
            a = reshaped_value_iteration(mdp, eta, tol, Q0=Q1, trace=False)
            b = reshaped_value_iteration(mdp, eta, tol, Q0=Q2, trace=False)
            gap = float(np.max(np.abs(a.Q - b.Q)))
        except (DivergenceError, NonConvergenceError) as err:
            gap = float("inf")
            row["error"] = str(err)
        ok = est <= row["bound"] + 1e-9 and gap < 10 * tol
        passed &= ok
        row.update(status="inside contraction regime", lipschitz_estimate=est, fixed_point_gap=gap, passed=ok)
        rows.append(row)
    return {"suite": "contraction", "passed": bool(passed), "tol": tol, "pairs": rows}


@_timed
def lemma_suite(n_pairs=100_000, seed=0, n_states=8, n_actions=4, batch=10_000):
    """The per-state max operator is non-expansive in sup norm, exactly."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    done = 0
    while done < n_pairs:
        n = min(batch, n_pairs - done)
        Q1 = rng.normal(size=(n, n_states, n_actions)) * rng.uniform(0.01, 100, size=(n, 1, 1))
        Q2 = Q1 + rng.normal(size=(n, n_states, n_actions)) * 10.0 ** rng.uniform(-8, 1, size=(n, 1, 1))
        worst = max(worst, max_nonexpansion_violation(Q1, Q2))
        done += n
    return {"suite": "lemma", "passed": bool(worst <= 0.0), "max_violation": float(worst), "n_pairs": n_pairs}


def _rel_err(a, b, floor=1e-4):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


@_timed
def qce_gradient_suite(n_triples=1000, seed=0, h=1e-6, rel_tol=1e-4, n_bins=51):
    """Analytic QCE gradient against central differences (weight held fixed),
    plus the exactness of the two-hot round trip."""
    rng = np.random.default_rng(seed)
    support = Support(-2.0, 8.0, n_bins)
    worst = 0.0
    for _ in range(n_triples):
        z = rng.normal(size=n_bins) * rng.uniform(0.1, 3.0)
        y = float(rng.uniform(support.vmin - 1.0, support.vmax + 1.0))
        tau = float(rng.uniform(0.5, 1.0))
        cfg = QceConfig(support, tau)
        loss, grad = qce_loss(z, y, cfg)
        t = two_hot_encode(y, support)
        nz = t > 0
        w = loss / -float(np.sum(t[nz] * log_softmax(z)[nz])) if loss != 0 else 0.0

        def ce(v):
            return -float(np.sum(t[nz] * log_softmax(v)[nz]))

        num = np.empty(n_bins)
        for i in range(n_bins):
            e = np.zeros(n_bins)
            e[i] = h
            num[i] = w * (ce(z + e) - ce(z - e)) / (2 * h)
        worst = max(worst, _rel_err(grad, num))
    ys = np.concatenate([rng.uniform(support.vmin, support.vmax, 10_000), support.centers])
    rt = float(np.max(np.abs(expectation(two_hot_encode(ys, support), support) - ys)))
    return {"suite": "qce_gradient", "passed": worst < rel_tol and rt <= 1e-12, "max_rel_error": worst,
            "rel_tol": rel_tol, "round_trip_error": rt, "n_triples": n_triples}


@_timed
def optimism_suite(taus=(0.5, 0.55, 0.75, 0.9), n_samples=1000, p=0.1, n_bins=101):
    """Fitted expectations of a Bernoulli(p) target set rise strictly with tau.

    The target set holds exactly ``round(p * n)`` ones, so its empirical mean
    is ``p`` and the tau = 0.5 fit can be compared with ``p`` directly.
    """
    support = Support(0.0, 1.0, n_bins)
    ones = int(round(p * n_samples))
    ys = np.zeros(n_samples)
    ys[:ones] = 1.0
    fits = {}
    for tau in taus:
        f = qce_fit(ys, QceConfig(support, tau))
        fits[tau] = {"expectation": f.expectation, "steps": f.steps, "converged": f.converged}
    ex = [fits[t]["expectation"] for t in taus]
    near = abs(fits[taus[0]]["expectation"] - p) <= support.width / 2
    increasing = all(b > a for a, b in zip(ex, ex[1:]))
    return {"suite": "optimism", "passed": bool(near and increasing), "half_bin": support.width / 2,
            "fits": {str(t): v for t, v in fits.items()}, "increasing": increasing, "near_mean": near}


@_timed
def planner_suite(seed=0, n_repeats=200, n_sanity=20):
    """Degeneracy of the elite update under a flat reward, drift under a
    linear potential, quadratic sanity planning and seed determinism."""
    deg = degeneracy_diagnostic(PlannerConfig(), rng_seed=seed, n_repeats=n_repeats)
    cfg = PlannerConfig(horizon=1)
    errs = []
    for s in range(n_sanity):
        env = PointMassEnv(dim=1, start=[0.3], goal_center=[0.9], reward_mode="dense-quadratic")
        res = mppi_plan(PointMassModel(env), np.array([0.3]), cfg, rng_seed=seed + s)
        errs.append(abs(float(res.action[0]) - 0.6))
    env = PointMassEnv(dim=2, reward_mode="dense-quadratic")
    a = mppi_plan(PointMassModel(env), env.start, PlannerConfig(), rng_seed=seed)
    b = mppi_plan(PointMassModel(env), env.start, PlannerConfig(), rng_seed=seed)
    deterministic = bool(np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)
                         and np.array_equal(a.action, b.action))
    sanity = max(errs) < 0.05
    return {"suite": "planner", "passed": bool(deg.passed and sanity and deterministic),
            "degeneracy": deg.to_dict(), "quadratic_max_error": max(errs), "quadratic_ok": sanity,
            "deterministic": deterministic}


SUITES = {
    "theorem": (theorem_suite, smoothing_suite),
    "contraction": (contraction_suite, lemma_suite),
    "qce": (qce_gradient_suite, optimism_suite),
    "planner": (planner_suite,),
}


def run_suites(name="all", **overrides):
    names = list(SUITES) if name == "all" else [name]
    results = []
    for n in names:
        for fn in SUITES[n]:
            kw = overrides.get(fn.__name__, {})
            results.append(fn(**kw))
    return {"suite": name, "passed": all(r["passed"] for r in results), "results": results}
