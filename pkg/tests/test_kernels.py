"""The numba kernels and their numpy twins must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slope_lab import kernels
from slope_lab._jit import HAS_NUMBA
from slope_lab.distval import Support, two_hot_encode
from slope_lab.mdp import random_mdp

pytestmark = pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")


def _batch(rng, S, A, n):
    return (rng.integers(0, S, n), rng.integers(0, A, n), rng.random(n), rng.integers(0, S, n),
            rng.random(n) < 0.2)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.5), st.floats(0.0, 0.99))
def test_reshaped_backup_twins(seed, eta, gamma):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, 7, 3, gamma)
    Q = rng.normal(size=(7, 3))
    a = kernels.reshaped_backup_nb(m.transition, m.reward, gamma, eta, Q)
    b = kernels.reshaped_backup_np(m.transition, m.reward, gamma, eta, Q)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.02))
def test_iterate_twins(seed, eta):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, 6, 2, 0.9)
    Q0 = rng.normal(size=(6, 2))
    ra = kernels.iterate_nb(m.transition, m.reward, 0.9, eta, Q0.copy(), 1e-10, 10_000, True, 1e12)
    rb = kernels.iterate_np(m.transition, m.reward, 0.9, eta, Q0.copy(), 1e-10, 10_000, True, 1e12)
    assert ra[3] == rb[3] == kernels.CONVERGED
    assert abs(ra[1] - rb[1]) <= 1
    np.testing.assert_allclose(ra[0], rb[0], atol=1e-9)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.01, 1.0))
def test_scalar_updates_twins(seed, eta, lr):
    rng = np.random.default_rng(seed)
    S, A = 5, 3
    Q = rng.normal(size=(S, A))
    batch = _batch(rng, S, A, 40)
    Qa, Qb = Q.copy(), Q.copy()
    kernels.scalar_updates_nb(Qa, *batch, 0.95, eta, lr)
    kernels.scalar_updates_np(Qb, *batch, 0.95, eta, lr)
    np.testing.assert_allclose(Qa, Qb, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.5, 1.0))
def test_dist_updates_twins(seed, eta, tau):
    rng = np.random.default_rng(seed)
    S, A, B = 4, 2, 21
    sup = Support(-1.0, 2.0, B)
    logits = rng.normal(size=(S, A, B))
    target = rng.normal(size=(S, A, B))
    batch = _batch(rng, S, A, 30)
    la, ta = logits.copy(), target.copy()
    lb, tb = logits.copy(), target.copy()
    ca = kernels.dist_updates_nb(la, ta, *batch, 0.95, eta, 0.5, tau, sup.centers, sup.vmin, sup.vmax, 7, 10)
    cb = kernels.dist_updates_np(lb, tb, *batch, 0.95, eta, 0.5, tau, sup.centers, sup.vmin, sup.vmax, 7, 10)
    assert ca == cb == 37
    np.testing.assert_allclose(la, lb, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(ta, tb, rtol=1e-10, atol=1e-10)


def test_qce_fit_twins():
    sup = Support(0.0, 1.0, 11)
    ys = np.sort(np.random.default_rng(0).random(50))
    t = two_hot_encode(ys, sup)
    prefix = np.vstack([np.zeros(11), np.cumsum(t, axis=0)])
    a = kernels.qce_fit_nb(np.zeros(11), sup.centers, ys, prefix, 0.6, 2.0, 500, 1e-12)
    b = kernels.qce_fit_np(np.zeros(11), sup.centers, ys, prefix, 0.6, 2.0, 500, 1e-12)
    assert a[1] == b[1] and a[4] == b[4]
    np.testing.assert_allclose(a[0], b[0], atol=1e-10)
    np.testing.assert_allclose(a[3], b[3], atol=1e-10)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, SLOPE_LAB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "import slope_lab; print(slope_lab.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_numpy_backend_runs_training():
    code = ("import numpy as np\n"
            "from slope_lab.agent import LearnerConfig, three_phase_train\n"
            "from slope_lab.envs import TabularEnv\n"
            "from slope_lab.mdp import GridWorldSpec\n"
            "env = TabularEnv.from_gridworld(GridWorldSpec(3, 1, (0, 2), (0, 0)), 20)\n"
            "r = three_phase_train(env, [], LearnerConfig(episodes=10, eval_interval=5), 0)\n"
            "print(r.final_success)\n")
    env = dict(os.environ, SLOPE_LAB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert float(out.stdout.strip()) == 1.0
