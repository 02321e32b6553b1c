"""Potential-based reward shaping and its numerical guarantees.

Potentials come in five flavours (none, static table, bootstrapped from the
agent's own Q, similarity to a visitation archive, policy entropy). Shaping
adds ``gamma * E[phi(s')] - phi(s)`` to the reward. With a static bounded
potential the optimal policy is unchanged and optimal values shift by
``-phi``; with the bootstrapped potential ``eta * max_a Q`` the reshaped
backup is a contraction whenever ``eta * (1 + gamma) + gamma < 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, DivergenceError, NonConvergenceError
from .mdp import TabularMdp, greedy_sets, value_iteration

# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoPotential:
    kind = "none"


@dataclass(frozen=True, eq=False)
class StaticPotential:
    table: np.ndarray
    kind = "static"

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if not np.all(np.isfinite(table)):
            raise ContractError("static potential must be finite")
        object.__setattr__(self, "table", table)


@dataclass(frozen=True)
class BootstrappedPotential:
    eta: float = 1.0
    kind = "bootstrapped"

    def __post_init__(self):
        if self.eta < 0:
            raise ContractError("eta must be non-negative")


@dataclass(frozen=True, eq=False)
class SimilarityPotential:
    """Squared feature distance to the nearest archived state, over ``bandwidth**2``.

    ``features`` maps state ids to feature rows, e.g. grid coordinates.
    """
    features: np.ndarray
    bandwidth: float = 1.0
    kind = "similarity"

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        if self.bandwidth <= 0:
            raise ContractError("bandwidth must be positive")


@dataclass(frozen=True)
class EntropyPotential:
    """Entropy of ``softmax(Q[s] / temperature)``."""
    temperature: float = 1.0
    kind = "entropy"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")


Potential = NoPotential | StaticPotential | BootstrappedPotential | SimilarityPotential | EntropyPotential


def _q_context(pot, context):
    if context is None:
        raise ContractError(f"{pot.kind} potential needs a Q table as context")
    Q = np.asarray(context, dtype=np.float64)
    if Q.ndim != 2:
        raise ContractError(f"{pot.kind} potential needs a 2-D Q table, got shape {Q.shape}")
    return Q


def _softmax_entropy(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    logp = z - np.log(e.sum(axis=-1, keepdims=True))
    return -(p * logp).sum(axis=-1)


def potential_table(pot, context=None, n_states: int | None = None) -> np.ndarray:
    """Evaluate ``pot`` on every state at once."""
    if isinstance(pot, NoPotential):
        if n_states is None:
            if context is None:
                raise ContractError("need n_states or a context to size the zero potential")
            n_states = len(context)
        return np.zeros(n_states)
    if isinstance(pot, StaticPotential):
        return pot.table.copy()
    if isinstance(pot, BootstrappedPotential):
        return pot.eta * _q_context(pot, context).max(axis=1)
    if isinstance(pot, EntropyPotential):
        return _softmax_entropy(_q_context(pot, context) / pot.temperature)
    if isinstance(pot, SimilarityPotential):
        feats = pot.features
        archive = np.zeros((0, feats.shape[1])) if context is None else np.asarray(context)
        if archive.ndim == 1:
            # state ids
            archive = feats[archive.astype(np.int64)]
        if archive.shape[0] == 0:
            return np.zeros(feats.shape[0])
        d2 = ((feats[:, None, :] - archive[None, :, :]) ** 2).sum(axis=2)
        return d2.min(axis=1) / pot.bandwidth ** 2
    raise ContractError(f"unknown potential {pot!r}")


def potential_value(pot, context, s) -> float:
    """Potential of a single state.

    Context by variant: none/static ignore it, bootstrapped and entropy take a
    Q table, similarity takes the archive (state ids or feature rows).
    """
    s = int(s)
    if isinstance(pot, NoPotential):
        return 0.0
    if isinstance(pot, StaticPotential):
        return float(pot.table[s])
    if isinstance(pot, BootstrappedPotential):
        return float(pot.eta * _q_context(pot, context)[s].max())
    if isinstance(pot, EntropyPotential):
        return float(_softmax_entropy(_q_context(pot, context)[s] / pot.temperature))
    if isinstance(pot, SimilarityPotential):
        return float(potential_table(pot, context)[s])
    raise ContractError(f"unknown potential {pot!r}")


def ensemble_contexts(q_tables):
    """(average, minimum) of an ensemble of Q tables.

    The current-state potential reads the average and the next-state potential
    the minimum, which keeps overestimated successors from inflating shaping.
    """
    q = np.asarray(q_tables, dtype=np.float64)
    return q.mean(axis=0), q.min(axis=0)


def shaping_term(pot, gamma, s, s_next, context=None, next_context=None, done=False) -> float:
    """Sampled ``gamma * phi(s') - phi(s)``; a terminal successor has zero potential."""
    next_context = context if next_context is None else next_context
    phi_next = 0.0 if done else potential_value(pot, next_context, s_next)
    return gamma * phi_next - potential_value(pot, context, s)


# ---------------------------------------------------------------------------
# shaped rewards with an exact expectation over P
# ---------------------------------------------------------------------------

def shaped_reward_table(mdp: TabularMdp, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (mdp.n_states,):
        raise ContractError(f"potential has shape {phi.shape}, expected ({mdp.n_states},)")
    return mdp.reward + mdp.gamma * (mdp.transition @ phi) - phi[:, None]


def shaped_reward(mdp: TabularMdp, pot, context, s, a) -> float:
    """``r(s,a) + gamma * sum_s' P(s'|s,a) phi(s') - phi(s)``."""
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise ContractError(f"invalid state/action ({s}, {a})")
    phi = potential_table(pot, context, mdp.n_states)
    return float(mdp.reward[s, a] + mdp.gamma * (mdp.transition[s, a] @ phi) - phi[s])


def reshaped_mdp(mdp: TabularMdp, phi) -> TabularMdp:
    return mdp.with_reward(shaped_reward_table(mdp, phi))


def discounted_shaped_return(rewards, states, next_states, phi, gamma, dones=None) -> float:
    """Discounted sum of sampled shaped rewards along one trajectory."""
    total = 0.0
    for t, (r, s, s2) in enumerate(zip(rewards, states, next_states)):
        terminal = dones is not None and dones[t]
        phi2 = 0.0 if terminal else phi[s2]
        total += gamma ** t * (r + gamma * phi2 - phi[s])
    return total


# ---------------------------------------------------------------------------
# the dynamically reshaped operator
# ---------------------------------------------------------------------------

def eta_bound(gamma: float) -> float:
    """Largest shaping weight (exclusive) for which the reshaped backup contracts."""
    if not 0.0 <= gamma < 1.0:
        raise ContractError(f"gamma must lie in [0, 1), got {gamma}")
    return (1.0 - gamma) / (1.0 + gamma)


def lipschitz_bound(gamma: float, eta: float) -> float:
    return eta * (1.0 + gamma) + gamma


def reshaped_backup(mdp: TabularMdp, Q, eta: float) -> np.ndarray:
    """``r~_Q + gamma * E max Q`` where ``r~_Q`` uses ``phi = eta * max_a Q``."""
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    if Q.shape != mdp.reward.shape:
        raise ContractError(f"Q has shape {Q.shape}, expected {mdp.reward.shape}")
    return kernels.reshaped_backup(mdp.transition, mdp.reward, mdp.gamma, float(eta), Q)


def reshaped_backup_batch(mdp: TabularMdp, Qs, eta: float) -> np.ndarray:
    Qs = np.asarray(Qs, dtype=np.float64)
    V = Qs.max(axis=2)
    phi = eta * V
    ephi = np.einsum("ijk,nk->nij", mdp.transition, phi)
    ev = np.einsum("ijk,nk->nij", mdp.transition, V)
    return mdp.reward[None] + mdp.gamma * ephi - phi[:, :, None] + mdp.gamma * ev


@dataclass
class ReshapedResult:
    Q: np.ndarray
    iterations: int
    residual: float
    eta: float
    gamma: float
    in_contraction_regime: bool
    trace: list = field(default_factory=list)

    @property
    def note(self) -> str:
        return "inside contraction regime" if self.in_contraction_regime else "outside contraction regime"


def reshaped_value_iteration(mdp: TabularMdp, eta: float, tol: float = 1e-10, max_iter: int = 100_000,
                             Q0=None, trace: bool = True, overflow_guard: float = 1e12,
                             certify: bool = True) -> ReshapedResult:
    """Iterate the bootstrapped reshaped backup to its fixed point.

    Stops once ``max|Q_{k+1} - Q_k| < tol``. Inside the contraction regime and
    with ``certify`` the stop is tightened to ``L / (1 - L) * residual < tol``
    (``L = eta * (1 + gamma) + gamma``), which bounds the distance of the
    returned table to the true fixed point by ``tol``.

    With ``trace`` every iterate (starting with ``Q0``) is kept for landscape
    export. For ``eta`` at or beyond the contraction bound the run still
    proceeds; the result is then flagged as outside the contraction regime.
    Raises :class:`DivergenceError` once ``max|Q|`` exceeds ``overflow_guard``
    and :class:`NonConvergenceError` when ``max_iter`` runs out.
    """
    if eta < 0:
        raise ContractError("eta must be non-negative")
    if tol <= 0:
        raise ContractError("tol must be positive")
    inside = eta < eta_bound(mdp.gamma)
    Q = np.zeros_like(mdp.reward) if Q0 is None else np.array(Q0, dtype=np.float64)
    stop = tol
    if inside and certify:
        L = lipschitz_bound(mdp.gamma, eta)
        if L > 0:
            stop = tol * (1.0 - L) / L
        # rounding floor: backups of tables of size ~1/(1-gamma) cannot settle below a few ulps
        scale = max(1.0, float(np.max(np.abs(mdp.reward))) / (1.0 - mdp.gamma))
        stop = max(stop, 64 * np.finfo(float).eps * scale)
    if trace:
        history = [Q.copy()]
        status, residual, k = kernels.MAX_ITER, np.inf, 0
        for k in range(1, max_iter + 1):
            Qn = kernels.reshaped_backup(mdp.transition, mdp.reward, mdp.gamma, float(eta), Q)
            residual = float(np.max(np.abs(Qn - Q)))
            Q = Qn
            history.append(Q)
            big = float(np.max(np.abs(Q)))
            if not np.isfinite(big) or big > overflow_guard:
                status = kernels.DIVERGED
                break
            if residual < stop:
                status = kernels.CONVERGED
                break
    else:
        history = []
        Q, k, residual, status = kernels.iterate(mdp.transition, mdp.reward, mdp.gamma, float(eta),
                                                 np.ascontiguousarray(Q), stop, max_iter, False, overflow_guard)
    if status == kernels.DIVERGED:
        raise DivergenceError(f"reshaped value iteration diverged at iteration {k} (eta={eta}, gamma={mdp.gamma})",
                              iterations=k, trace=history)
    if status != kernels.CONVERGED:
        raise NonConvergenceError("reshaped value iteration did not converge", residual=residual, iterations=k)
    return ReshapedResult(Q, k, residual, float(eta), mdp.gamma, inside, history)


def reshaped_trace(mdp: TabularMdp, eta: float, n_iter: int, Q0=None, overflow_guard: float = 1e12,
                   step: float = 1.0):
    """Exactly ``n_iter`` reshaped backups from ``Q0``; returns the iterates and
    whether the overflow guard tripped (iterates stop there).

    ``step < 1`` damps each iterate, ``Q <- Q + step * (T~Q - Q)``: the
    expected full-sweep update of a tabular learner with that learning rate.
    """
    if not 0.0 < step <= 1.0:
        raise ContractError("step must lie in (0, 1]")
    Q = np.zeros_like(mdp.reward) if Q0 is None else np.array(Q0, dtype=np.float64)
    history = [Q.copy()]
    for _ in range(n_iter):
        TQ = kernels.reshaped_backup(mdp.transition, mdp.reward, mdp.gamma, float(eta), Q)
        Q = TQ if step == 1.0 else Q + step * (TQ - Q)
        history.append(Q)
        if not np.all(np.isfinite(Q)) or np.max(np.abs(Q)) > overflow_guard:
            return history, True
    return history, False


def shaped_landscape(mdp: TabularMdp, Q, eta: float) -> np.ndarray:
    """Per-state shaped reward of the best action, with ``phi = eta * max_a Q``."""
    phi = eta * np.asarray(Q).max(axis=1)
    return shaped_reward_table(mdp, phi).max(axis=1)


def _random_q_pairs(rng, n, shape):
    Q1 = rng.normal(size=(n,) + shape) * rng.uniform(0.1, 10.0, size=(n, 1, 1))
    scale = 10.0 ** rng.uniform(-6, 1, size=(n, 1, 1))
    Q2 = Q1 + rng.normal(size=(n,) + shape) * scale
    return Q1, Q2


def lipschitz_estimate(mdp: TabularMdp, eta: float, n_trials: int = 1000, rng_seed: int = 0,
                       batch: int = 250) -> float:
    """Largest observed ``|T~Q1 - T~Q2|_inf / |Q1 - Q2|_inf`` over random pairs.

    Each side is backed up with the potential derived from its own table.
    """
    if n_trials < 1:
        raise ContractError("n_trials must be at least 1")
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    done = 0
    while done < n_trials:
        n = min(batch, n_trials - done)
        Q1, Q2 = _random_q_pairs(rng, n, mdp.reward.shape)
        T1 = reshaped_backup_batch(mdp, Q1, eta)
        T2 = reshaped_backup_batch(mdp, Q2, eta)
        num = np.abs(T1 - T2).reshape(n, -1).max(axis=1)
        den = np.abs(Q1 - Q2).reshape(n, -1).max(axis=1)
        worst = max(worst, float(np.max(num / den)))
        done += n
    return worst


def max_nonexpansion_violation(Q1, Q2) -> float:
    """Largest per-state excess of ``|max Q1(s,.) - max Q2(s,.)|`` over
    ``|Q1 - Q2|_inf``; non-positive when the max operator is non-expansive.

    Works on single tables (S, A) or stacks (n, S, A).
    """
    Q1 = np.asarray(Q1, dtype=np.float64)
    Q2 = np.asarray(Q2, dtype=np.float64)
    gap = np.abs(Q1.max(axis=-1) - Q2.max(axis=-1))
    sup = np.abs(Q1 - Q2).max(axis=(-2, -1))
    return float(np.max(gap - np.expand_dims(sup, -1)))


# ---------------------------------------------------------------------------
# policy invariance under static shaping
# ---------------------------------------------------------------------------

@dataclass
class InvarianceReport:
    passed: bool
    max_v_residual: float
    max_q_residual: float
    argmax_mismatch_states: list
    residual_states: list
    iterations: tuple

    def to_dict(self):
        return {
            "passed": self.passed,
            "max_v_residual": self.max_v_residual,
            "max_q_residual": self.max_q_residual,
            "argmax_mismatch_states": self.argmax_mismatch_states,
            "residual_states": self.residual_states,
            "iterations": list(self.iterations),
        }


def check_policy_invariance(mdp: TabularMdp, pot: StaticPotential, tol: float = 1e-8,
                            argmax_atol: float | None = None) -> InvarianceReport:
    """Solve the original and the statically reshaped MDP and compare.

    Checks that greedy action sets agree state by state and that
    ``V~* = V* - phi`` and ``Q~* = Q* - phi`` hold within ``tol``.
    """
    if not isinstance(pot, StaticPotential):
        raise ContractError("policy invariance is stated for a static potential")
    phi = pot.table
    if phi.shape != (mdp.n_states,):
        raise ContractError(f"potential has shape {phi.shape}, expected ({mdp.n_states},)")
    vi_tol = max(min(1e-12, tol * (1.0 - mdp.gamma) / 100.0), 1e-15)
    V, Q, it1 = value_iteration(mdp, tol=vi_tol)
    Vs, Qs, it2 = value_iteration(reshaped_mdp(mdp, phi), tol=vi_tol)
    q_res = np.abs(Qs - (Q - phi[:, None]))
    v_res = np.abs(Vs - (V - phi))
    atol = argmax_atol if argmax_atol is not None else max(1e3 * vi_tol / (1.0 - mdp.gamma), 1e-10)
    sets_a, sets_b = greedy_sets(Q, atol), greedy_sets(Qs, atol)
    mismatch = [s for s in range(mdp.n_states) if sets_a[s] != sets_b[s]]
    bad = sorted(set(np.flatnonzero(q_res.max(axis=1) >= tol).tolist()) | set(np.flatnonzero(v_res >= tol).tolist()))
    return InvarianceReport(
        passed=not mismatch and not bad,
        max_v_residual=float(v_res.max()),
        max_q_residual=float(q_res.max()),
        argmax_mismatch_states=mismatch,
        residual_states=bad,
        iterations=(it1, it2),
    )


# ---------------------------------------------------------------------------
# sum-preserving Gaussian reward smoothing (temporal relaxation baseline)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SmoothingKernel:
    sigma: float
    half_window: int
    weights: np.ndarray

    @classmethod
    def gaussian(cls, sigma: float, half_window: int | None = None):
        if sigma <= 0:
            raise ContractError("sigma must be positive")
        L = int(round(3 * sigma)) if half_window is None else int(half_window)
        if L < 1:
            raise ContractError("half window must be at least 1")
        i = np.arange(-L, L + 1)
        w = np.exp(-(i ** 2) / (2.0 * sigma ** 2))
        return cls(float(sigma), L, w / w.sum())


def gaussian_smooth_rewards(rewards, sigma: float = 8.0, L: int | None = None) -> np.ndarray:
    """Spread every reward over ``t-L..t+L`` with Gaussian weights.

    Near the ends of the sequence the kernel of each source step is truncated
    and renormalised, so every reward keeps its full mass and the total is
    preserved exactly up to rounding.
    """
    kernel = SmoothingKernel.gaussian(sigma, L)
    r = np.asarray(rewards, dtype=np.float64).ravel()
    n = r.size
    if n == 0:
        return r.copy()
    L = kernel.half_window
    w = kernel.weights
    # mass of each source step's kernel that lands inside [0, n)
    cw = np.concatenate(([0.0], np.cumsum(w)))
    j = np.arange(n)
    lo = np.maximum(0, L - j)
    hi = np.minimum(2 * L + 1, L + n - j)
    inside = cw[hi] - cw[lo]
    src = r / inside
    padded = np.convolve(src, w, mode="full")  # index t + L
    return padded[L:L + n]
