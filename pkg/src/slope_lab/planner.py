"""MPPI planning with top-k elites over a step model, optionally potential-shaped.

Candidate noise is counter-based: iteration ``j`` of a plan seeded with
``seed`` draws from a Philox stream keyed by ``(seed, j)``, and candidate
``i`` owns a fixed block of that stream. Any single candidate can therefore be
regenerated on its own (see :func:`candidate_noise`), which is what makes a
parallel evaluation produce the same samples as the serial one.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy import stats
from scipy.special import ndtri

from .errors import ConfigError, ContractError, PlanningError


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 3
    n_samples: int = 512
    n_elites: int = 64
    temperature: float = 0.5
    n_iterations: int = 6
    sigma_init: float = 2.0
    sigma_min: float = 0.05
    gamma: float = 0.95
    action_low: float = -1.0
    action_high: float = 1.0
    warm_start: bool = True
    discrete_dims: tuple = ()
    terminal_value: bool = False
    shaped: bool = False
    # re-inject the best sequence found so far as candidate 0 of each iteration
    carry_best: bool = True

    def __post_init__(self):
        if self.horizon < 1 or self.n_samples < 1 or self.n_iterations < 1:
            raise ConfigError("horizon, n_samples and n_iterations must be positive")
        if not 1 <= self.n_elites <= self.n_samples:
            raise ConfigError("need 1 <= n_elites <= n_samples")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.sigma_min <= self.sigma_init:
            raise ConfigError("need 0 < sigma_min <= sigma_init")
        if self.action_low >= self.action_high:
            raise ConfigError("action_low must be below action_high")
        object.__setattr__(self, "discrete_dims", tuple(bool(d) for d in self.discrete_dims))

    def mask(self, action_dim: int) -> np.ndarray:
        if not self.discrete_dims:
            return np.zeros(action_dim, dtype=bool)
        if len(self.discrete_dims) != action_dim:
            raise ConfigError(f"discrete_dims has length {len(self.discrete_dims)}, action dim is {action_dim}")
        return np.array(self.discrete_dims)


class RolloutModel(Protocol):
    """Batched step model the planner optimises against.

    ``step`` maps states (N, ds) and actions (N, da) to next states and
    predicted rewards (N,). ``potential`` and ``terminal_value`` map states to
    (N,) scalars and may be ``None``.
    """
    action_dim: int
    potential: Callable | None
    terminal_value: Callable | None

    def step(self, states, actions): ...


class FunctionModel:
    def __init__(self, step_fn, action_dim, potential=None, terminal_value=None):
        self._step = step_fn
        self.action_dim = action_dim
        self.potential = potential
        self.terminal_value = terminal_value

    def step(self, states, actions):
        return self._step(states, actions)


class PointMassModel:
    """Exact point-mass dynamics as a planning model.

    Reward is paid only on entering the goal; positions inside the goal count
    as terminal and have zero potential.
    """

    def __init__(self, env, potential=None, terminal_value=None):
        self.env = env
        self.action_dim = env.dim
        self._potential = potential
        self.potential = None if potential is None else self._terminal_potential
        self.terminal_value = terminal_value

    def _terminal_potential(self, states):
        phi = np.asarray(self._potential(states), dtype=np.float64)
        if self.env.reward_mode == "sparse":
            phi = np.where(self.env.in_goal(states), 0.0, phi)
        return phi

    def step(self, states, actions):
        x2, reward = self.env.dynamics(states, actions)
        if self.env.reward_mode == "sparse":
            reward = np.where(self.env.in_goal(states), 0.0, reward)
            x2 = np.where(self.env.in_goal(states)[..., None], states, x2)
        return x2, reward


class GridPotential:
    """Bilinear interpolation of per-cell values over a continuous plane.

    Cell ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` (scaled by ``cell``) and its
    value sits at the cell centre.
    """

    def __init__(self, values, cell=1.0, scale=1.0):
        self.values = np.asarray(values, dtype=np.float64)
        self.cell = float(cell)
        self.scale = float(scale)

    def __call__(self, states):
        x = np.atleast_2d(np.asarray(states, dtype=np.float64)) / self.cell - 0.5
        H, W = self.values.shape
        u = np.clip(x[:, 0], 0.0, H - 1.0)
        v = np.clip(x[:, 1], 0.0, W - 1.0)
        i0 = np.minimum(np.floor(u).astype(int), H - 2) if H > 1 else np.zeros(len(u), int)
        j0 = np.minimum(np.floor(v).astype(int), W - 2) if W > 1 else np.zeros(len(v), int)
        fu = u - i0
        fv = v - j0
        i1 = np.minimum(i0 + 1, H - 1)
        j1 = np.minimum(j0 + 1, W - 1)
        val = ((1 - fu) * (1 - fv) * self.values[i0, j0] + (1 - fu) * fv * self.values[i0, j1]
               + fu * (1 - fv) * self.values[i1, j0] + fu * fv * self.values[i1, j1])
        out = self.scale * val
        return out if np.ndim(states) > 1 else out[0]


# ---------------------------------------------------------------------------
# returns, elites, quantisation
# ---------------------------------------------------------------------------

def evaluate_returns(model, state, actions, gamma, shaped=False, terminal_value=False) -> np.ndarray:
    """Discounted returns of N action sequences (N, H, da) from one state.

    Shaping adds ``gamma * phi(s_{h+1}) - phi(s_h)`` to every per-step reward;
    the terminal value term is never shaped.
    """
    actions = np.asarray(actions, dtype=np.float64)
    N, H = actions.shape[:2]
    s = np.repeat(np.atleast_2d(np.asarray(state, dtype=np.float64)), N, axis=0)
    if shaped:
        if model.potential is None:
            raise ContractError("shaped returns need a model with a potential")
        phi = np.asarray(model.potential(s), dtype=np.float64)
    J = np.zeros(N)
    disc = 1.0
    for h in range(H):
        s2, r = model.step(s, actions[:, h])
        r = np.asarray(r, dtype=np.float64)
        if shaped:
            phi2 = np.asarray(model.potential(s2), dtype=np.float64)
            r = r + gamma * phi2 - phi
            phi = phi2
        J += disc * r
        disc *= gamma
        s = s2
    if terminal_value:
        if model.terminal_value is None:
            raise ContractError("terminal_value requested but the model has no value estimator")
        J += disc * np.asarray(model.terminal_value(s), dtype=np.float64)
    return J


def evaluate_return(model, state, action_sequence, gamma, shaped=False, terminal_value=False) -> float:
    seq = np.asarray(action_sequence, dtype=np.float64)
    if seq.ndim == 1:
        seq = seq[:, None]
    return float(evaluate_returns(model, state, seq[None], gamma, shaped, terminal_value)[0])


@dataclass
class EliteInfo:
    mu: np.ndarray
    sigma: np.ndarray
    elite_idx: np.ndarray
    weights: np.ndarray  # normalised, aligned with elite_idx
    raw_weights: np.ndarray  # exp(kappa * (J - max J))


def elite_update(actions, returns, config: PlannerConfig, return_info=False):
    """Exponentially weighted mean and std of the top-k sequences.

    Non-finite returns are dropped; ties in return go to the lower sample
    index. Weights are ``exp(kappa * (J_i - max J))``, the max-shifted form of
    ``exp(kappa * J_i)`` with identical ratios.
    """
    actions = np.asarray(actions, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    finite = np.flatnonzero(np.isfinite(returns))
    if finite.size == 0:
        raise PlanningError("every candidate return is non-finite")
    k = min(config.n_elites, finite.size)
    order = finite[np.argsort(-returns[finite], kind="stable")]
    elite_idx = order[:k]
    Je = returns[elite_idx]
    raw = np.exp(config.temperature * (Je - Je.max()))
    w = raw / raw.sum()
    elites = actions[elite_idx]
    mu = np.tensordot(w, elites, axes=1)
    var = np.tensordot(w, (elites - mu) ** 2, axes=1)
    sigma = np.maximum(np.sqrt(var), config.sigma_min)
    if return_info:
        return EliteInfo(mu, sigma, elite_idx, w, raw)
    return mu, sigma


def quantize_discrete_dims(action_sequence, mask) -> np.ndarray:
    """Map masked action dimensions to their sign, with sign(0) = +1."""
    a = np.array(action_sequence, dtype=np.float64, copy=True)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return a
    sub = a[..., mask]
    a[..., mask] = np.where(sub >= 0.0, 1.0, -1.0)
    return a


def ema_smooth_action(raw_action, prev_smoothed, alpha, grip_dims=None) -> np.ndarray:
    """``alpha * a + (1 - alpha) * prev`` on continuous dims; masked dims pass through."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    a = np.asarray(raw_action, dtype=np.float64)
    prev = np.asarray(prev_smoothed, dtype=np.float64)
    out = alpha * a + (1.0 - alpha) * prev
    if grip_dims is not None:
        mask = np.asarray(grip_dims, dtype=bool)
        out = np.where(mask, a, out)
    return out


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _block(horizon, action_dim):
    n = horizon * action_dim
    return n, -(-n // 4) * 4  # Philox emits words in groups of four


def _normals(u):
    return ndtri(np.clip(u, 1e-300, None))


def iteration_noise(seed: int, iteration: int, n_samples: int, horizon: int, action_dim: int) -> np.ndarray:
    n, block = _block(horizon, action_dim)
    bitgen = np.random.Philox(key=np.array([seed, iteration], dtype=np.uint64))
    u = np.random.Generator(bitgen).random(n_samples * block).reshape(n_samples, block)[:, :n]
    return _normals(u).reshape(n_samples, horizon, action_dim)


def candidate_noise(seed: int, iteration: int, index: int, horizon: int, action_dim: int) -> np.ndarray:
    """The noise of one candidate, regenerated without drawing the others."""
    n, block = _block(horizon, action_dim)
    bitgen = np.random.Philox(key=np.array([seed, iteration], dtype=np.uint64))
    bitgen.advance(index * block // 4)
    u = np.random.Generator(bitgen).random(n)
    return _normals(u).reshape(horizon, action_dim)


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

@dataclass
class PlanResult:
    action: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    elite_returns: list = field(default_factory=list)
    best_returns: list = field(default_factory=list)
    mean_returns: list = field(default_factory=list)
    mu_history: list = field(default_factory=list)
    best_sequence: np.ndarray | None = None
    best_return: float = -np.inf

    def csv_rows(self):
        dims = self.mu.shape[-1]
        header = ["iteration", "best_return", "mean_return"] + [f"mu_{d}" for d in range(dims)]
        rows = [header]
        for j, (b, m, mu) in enumerate(zip(self.best_returns, self.mean_returns, self.mu_history)):
            rows.append([j, repr(float(b)), repr(float(m))] + [repr(float(x)) for x in mu[0]])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.csv_rows())
        return buf.getvalue()


def prior_rollout_mean(model, state, prior_policy, horizon) -> np.ndarray:
    """Roll a prior policy through the model to seed the sampling mean."""
    s = np.atleast_2d(np.asarray(state, dtype=np.float64))
    seq = []
    for _ in range(horizon):
        a = np.atleast_1d(np.asarray(prior_policy(s[0]), dtype=np.float64))
        seq.append(a)
        s, _ = model.step(s, a[None])
    return np.array(seq)


def mppi_plan(model, state, config: PlannerConfig, prior_policy=None, rng_seed: int = 0,
              init_mean=None) -> PlanResult:
    """Run ``n_iterations`` of sample -> evaluate -> top-k update.

    The initial mean is ``init_mean`` if given, else a rollout of
    ``prior_policy`` when warm starting, else zeros.
    """
    H, da = config.horizon, model.action_dim
    mask = config.mask(da)
    lo, hi = config.action_low, config.action_high
    if init_mean is not None:
        mu = np.array(init_mean, dtype=np.float64).reshape(H, da)
    elif config.warm_start and prior_policy is not None:
        mu = prior_rollout_mean(model, state, prior_policy, H)
    else:
        mu = np.zeros((H, da))
    mu = quantize_discrete_dims(np.clip(mu, lo, hi), mask)
    sigma = np.full((H, da), config.sigma_init)
    result = PlanResult(action=mu[0].copy(), mu=mu, sigma=sigma)
    best_seq, best_J = mu.copy(), -np.inf
    for j in range(config.n_iterations):
        eps = iteration_noise(rng_seed, j, config.n_samples, H, da)
        actions = np.clip(mu[None] + sigma[None] * eps, lo, hi)
        actions = quantize_discrete_dims(actions, mask)
        if config.carry_best:
            actions[0] = best_seq
        J = evaluate_returns(model, state, actions, config.gamma, config.shaped, config.terminal_value)
        info = elite_update(actions, J, config, return_info=True)
        mu = quantize_discrete_dims(info.mu, mask)
        sigma = info.sigma
        i_best = info.elite_idx[0]
        if J[i_best] > best_J:
            best_J, best_seq = float(J[i_best]), actions[i_best].copy()
        finite = J[np.isfinite(J)]
        result.elite_returns.append(J[info.elite_idx].copy())
        result.best_returns.append(float(J[i_best]))
        result.mean_returns.append(float(finite.mean()))
        result.mu_history.append(mu.copy())
    result.action = np.clip(mu[0], lo, hi)
    result.mu = mu
    result.sigma = sigma
    result.best_sequence = best_seq
    result.best_return = best_J
    return result


class MppiAgent:
    """Receding-horizon controller: executes the first action of the final mean
    and shifts the rest forward as the next call's initial mean."""

    def __init__(self, model, config: PlannerConfig, prior_policy=None, seed: int = 0):
        self.model = model
        self.config = config
        self.prior_policy = prior_policy
        self.seed = int(seed)
        self._mean = None
        self._calls = 0
        self.last_result = None

    def reset(self):
        self._mean = None
        self._calls = 0

    def act(self, state, t=None, rng=None):
        init = None
        if self._mean is not None:
            tail = self._mean[1:]
            if self.config.warm_start and self.prior_policy is not None:
                last = prior_rollout_mean(self.model, state, self.prior_policy, self.config.horizon)[-1:]
            else:
                last = np.zeros((1, tail.shape[1]))
            init = np.concatenate([tail, last])
        # one Philox key per (episode seed, call): calls index the high bits
        res = mppi_plan(self.model, state, self.config, self.prior_policy,
                        rng_seed=self.seed * 1_000_003 + self._calls, init_mean=init)
        self._calls += 1
        self._mean = res.mu
        self.last_result = res
        return res.action


# ---------------------------------------------------------------------------
# sparse-reward degeneracy
# ---------------------------------------------------------------------------

@dataclass
class DegeneracyReport:
    weights_uniform: bool
    max_weight_spread: float
    ks_statistic: float
    ks_pvalue: float
    equivalence_passed: bool
    shaped_returns_nonconstant: bool
    mean_projection: float
    projection_tstat: float
    drift_passed: bool
    n_repeats: int
    significance: float = 0.01

    @property
    def passed(self) -> bool:
        return self.weights_uniform and self.equivalence_passed and self.drift_passed and \
            self.shaped_returns_nonconstant

    def to_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def degeneracy_diagnostic(config: PlannerConfig, rng_seed: int = 0, n_repeats: int = 200,
                          significance: float = 0.01, dim: int = 1) -> DegeneracyReport:
    """Show that a flat reward reduces the elite update to averaging noise.

    Each repeat draws one batch of candidates around a zero mean and applies
    one elite update (a) under an identically-zero reward model and (b) under
    a linear potential ``phi(x) = sum(x)`` with zero reward. For (a) the
    displacement of the new mean is compared with that of a plain average of
    ``k`` candidates chosen uniformly at random from the same batch.
    """
    H, N, k = config.horizon, config.n_samples, config.n_elites

    def zero_step(s, a):
        return s + a, np.zeros(len(s))

    flat = FunctionModel(zero_step, dim)
    shaped = FunctionModel(zero_step, dim, potential=lambda s: s.sum(axis=1))
    pick_rng = np.random.default_rng([rng_seed, 1])
    state = np.zeros(dim)
    spread, disp_elite, disp_random, projections = 0.0, [], [], []
    nonconstant = True
    for i in range(n_repeats):
        eps = iteration_noise(rng_seed, i, N, H, dim)
        actions = np.clip(config.sigma_init * eps, config.action_low, config.action_high)
        J0 = evaluate_returns(flat, state, actions, config.gamma)
        info = elite_update(actions, J0, config, return_info=True)
        spread = max(spread, float(info.raw_weights.max() - info.raw_weights.min()))
        disp_elite.append(float(np.linalg.norm(info.mu)))
        pick = pick_rng.choice(N, size=k, replace=False)
        disp_random.append(float(np.linalg.norm(actions[pick].mean(axis=0))))
        Js = evaluate_returns(shaped, state, actions, config.gamma, shaped=True)
        nonconstant &= bool(np.ptp(Js) > 0.0)
        mu_s, _ = elite_update(actions, Js, config)
        projections.append(float(mu_s.sum()))
    ks = stats.ks_2samp(disp_elite, disp_random)
    proj = np.array(projections)
    tstat = float(proj.mean() / (proj.std(ddof=1) / np.sqrt(len(proj)))) if len(proj) > 1 else np.inf
    return DegeneracyReport(
        weights_uniform=spread <= 1e-12,
        max_weight_spread=spread,
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        equivalence_passed=bool(ks.pvalue > significance),
        shaped_returns_nonconstant=nonconstant,
        mean_projection=float(proj.mean()),
        projection_tstat=tstat,
        drift_passed=bool(proj.mean() > 0.0),
        n_repeats=n_repeats,
        significance=significance,
    )
