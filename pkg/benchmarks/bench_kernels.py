"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both twins are imported directly, so the SLOPE_LAB_NUMBA flag does not matter
here. The first numba call (compilation) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from slope_lab import kernels
from slope_lab.distval import Support, two_hot_encode
from slope_lab.mdp import build_gridworld, default_gridworld, random_mdp


def _best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _cases():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, 60, 4, 0.95)
    P, r = mdp.transition, mdp.reward
    Q = rng.normal(size=r.shape)

    def backup(f):
        return lambda: f(P, r, 0.95, 0.02, Q)

    def iterate(f):
        return lambda: f(P, r, 0.95, 0.02, np.zeros_like(r), 1e-10, 5000, False, 1e12)

    grid = build_gridworld(default_gridworld(slip_prob=0.1))
    n = 20_000
    s = rng.integers(0, grid.n_states, n)
    a = rng.integers(0, 4, n)
    s2 = rng.integers(0, grid.n_states, n)
    rew = (rng.random(n) < 0.05).astype(np.float64)
    done = rew > 0

    def scalar(f):
        def run():
            f(np.zeros((grid.n_states, 4)), s, a, rew, s2, done, 0.95, 1.0, 0.5)
        return run

    sup = Support.for_discount(0.95)
    m = 2_000

    def dist(f):
        def run():
            z = np.zeros((grid.n_states, 4, sup.n_bins))
            f(z, z.copy(), s[:m], a[:m], rew[:m], s2[:m], done[:m], 0.95, 1.0, 0.1, 0.55,
              sup.centers, sup.vmin, sup.vmax, 0, 100)
        return run

    ys = np.sort(rng.uniform(0.0, 10.0, 1000))
    targets = two_hot_encode(ys, sup)
    prefix = np.zeros((ys.size + 1, sup.n_bins))
    np.cumsum(targets, axis=0, out=prefix[1:])

    def qce(f):
        return lambda: f(np.zeros(sup.n_bins), sup.centers, ys, prefix, 0.75, 1.0, 500, 0.0)

    return [
        ("reshaped_backup 60x4", backup, kernels.reshaped_backup_nb, kernels.reshaped_backup_np),
        ("iterate 60x4 to 1e-10", iterate, kernels.iterate_nb, kernels.iterate_np),
        (f"scalar_updates x{n}", scalar, kernels.scalar_updates_nb, kernels.scalar_updates_np),
        (f"dist_updates x{m}", dist, kernels.dist_updates_nb, kernels.dist_updates_np),
        ("qce_fit 1000 samples, 500 steps", qce, kernels.qce_fit_nb, kernels.qce_fit_np),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"{'kernel':34s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}")
    for name, make, f_nb, f_np in _cases():
        run_nb, run_np = make(f_nb), make(f_np)
        run_nb()  # compile
        t_nb = _best_of(run_nb, args.repeat)
        t_np = _best_of(run_np, args.repeat)
        print(f"{name:34s} {t_nb:10.5f} {t_np:10.5f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
