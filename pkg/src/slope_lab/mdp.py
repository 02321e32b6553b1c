"""Finite MDPs, GridWorld construction and the exact dynamic-programming oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, NonConvergenceError

# action order used by every GridWorld: up, down, left, right
ACTIONS = ("up", "down", "left", "right")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

STOCHASTIC_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with reward ``r[s, a]`` (expectation over s' folded in)."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal: frozenset = frozenset()

    def __post_init__(self):
        P = np.ascontiguousarray(self.transition, dtype=np.float64)
        r = np.ascontiguousarray(self.reward, dtype=np.float64)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "terminal", frozenset(int(s) for s in self.terminal))
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2]:
            raise ConfigError(f"inconsistent shapes: P{P.shape}, r{r.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > STOCHASTIC_ATOL:
            raise ConfigError("transition rows must be probability vectors")
        if not np.all(np.isfinite(r)):
            raise ConfigError("rewards must be finite")
        for s in self.terminal:
            if P[s, :, s].min() < 1.0 - STOCHASTIC_ATOL or np.any(r[s] != 0.0):
                raise ConfigError(f"terminal state {s} must self-loop with reward 0")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def is_sparse(self) -> bool:
        return bool(np.all((self.reward == 0.0) | (self.reward == 1.0)))

    def with_reward(self, reward) -> "TabularMdp":
        """Same dynamics under another reward table; terminal labels are dropped
        when the new reward is nonzero there."""
        reward = np.asarray(reward, dtype=np.float64)
        terminal = frozenset(s for s in self.terminal if not np.any(reward[s] != 0.0))
        return TabularMdp(self.transition, reward, self.gamma, terminal)

    def permuted(self, perm) -> "TabularMdp":
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        P = self.transition[perm][:, :, perm]
        inv = np.argsort(perm)
        return TabularMdp(P, self.reward[perm], self.gamma, frozenset(int(inv[s]) for s in self.terminal))


@dataclass(frozen=True)
class GridWorldSpec:
    width: int
    height: int
    goal: tuple
    start: tuple
    walls: frozenset = field(default_factory=frozenset)
    slip_prob: float = 0.0
    gamma: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset(tuple(w) for w in self.walls))
        object.__setattr__(self, "goal", tuple(self.goal))
        object.__setattr__(self, "start", tuple(self.start))
        if self.width < 1 or self.height < 1:
            raise ConfigError("grid dimensions must be positive")
        for name in ("goal", "start"):
            cell = getattr(self, name)
            if not self.in_bounds(cell):
                raise ConfigError(f"{name} {cell} is out of bounds")
            if cell in self.walls:
                raise ConfigError(f"{name} {cell} lies on a wall")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ConfigError("slip_prob must lie in [0, 1)")

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def index(self, cell) -> int:
        return cell[0] * self.width + cell[1]

    def cell(self, index: int) -> tuple:
        return divmod(int(index), self.width)

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def start_state(self) -> int:
        return self.index(self.start)

    @property
    def goal_state(self) -> int:
        return self.index(self.goal)


def _successor(spec: GridWorldSpec, cell, move):
    nxt = (cell[0] + move[0], cell[1] + move[1])
    if not spec.in_bounds(nxt) or nxt in spec.walls:
        return cell
    return nxt


def build_gridworld(spec: GridWorldSpec) -> TabularMdp:
    """Four-action GridWorld with +1 on entering the goal.

    Goal and wall cells are absorbing with zero reward. With ``slip_prob`` the
    chosen move is replaced by a uniformly random one (possibly itself).
    """
    S, A = spec.n_states, len(MOVES)
    det = np.zeros((S, A, S))
    for s in range(S):
        cell = spec.cell(s)
        absorbing = cell in spec.walls or cell == spec.goal
        for a, move in enumerate(MOVES):
            nxt = cell if absorbing else _successor(spec, cell, move)
            det[s, a, spec.index(nxt)] = 1.0
    P = (1.0 - spec.slip_prob) * det + spec.slip_prob * det.mean(axis=1, keepdims=True)
    g = spec.goal_state
    entering = np.zeros(S)
    entering[g] = 1.0
    r = P @ entering
    terminal = {spec.index(w) for w in spec.walls} | {g}
    r[list(terminal)] = 0.0
    return TabularMdp(P, r, spec.gamma, frozenset(terminal))


def parse_gridworld(text: str, slip_prob: float = 0.0, gamma: float = 0.95) -> GridWorldSpec:
    """Read a map: ``#`` wall, ``.`` free, ``S`` start, ``G`` goal."""
    rows = [line.rstrip("\r\n") for line in text.splitlines()]
    rows = [row for row in rows if row.strip() and not row.lstrip().startswith(";")]
    if not rows:
        raise ConfigError("empty map")
    width = len(rows[0])
    walls, start, goal = set(), None, None
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ConfigError(f"map row {i} has length {len(row)}, expected {width}")
        for j, ch in enumerate(row):
            if ch == "#":
                walls.add((i, j))
            elif ch == "S":
                if start is not None:
                    raise ConfigError("map has more than one start")
                start = (i, j)
            elif ch == "G":
                if goal is not None:
                    raise ConfigError("map has more than one goal")
                goal = (i, j)
            elif ch != ".":
                raise ConfigError(f"unknown map character {ch!r} at row {i}, col {j}")
    if start is None or goal is None:
        raise ConfigError("map needs exactly one S and one G")
    return GridWorldSpec(width, len(rows), goal, start, frozenset(walls), slip_prob, gamma)


def load_gridworld(path, slip_prob: float = 0.0, gamma: float = 0.95) -> GridWorldSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read map file {path}: {exc}") from exc
    return parse_gridworld(text, slip_prob, gamma)


def default_layout_path() -> Path:
    return Path(__file__).with_name("layouts") / "fig3_approx_10x10.txt"


def default_gridworld(slip_prob: float = 0.0, gamma: float = 0.95) -> GridWorldSpec:
    """10x10 layout approximating the toy figure (exact walls are unpublished)."""
    return load_gridworld(default_layout_path(), slip_prob, gamma)


def render_gridworld(spec: GridWorldSpec) -> str:
    lines = []
    for i in range(spec.height):
        row = []
        for j in range(spec.width):
            c = (i, j)
            row.append("#" if c in spec.walls else "S" if c == spec.start else "G" if c == spec.goal else ".")
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dynamic programming
# ---------------------------------------------------------------------------

def _check_q(mdp: TabularMdp, Q):
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != mdp.reward.shape:
        raise ContractError(f"Q has shape {Q.shape}, expected {mdp.reward.shape}")
    return np.ascontiguousarray(Q)


def bellman_backup(mdp: TabularMdp, Q) -> np.ndarray:
    """One application of ``Q'[s,a] = r[s,a] + gamma * E_{s'} max_a' Q[s',a']``."""
    Q = _check_q(mdp, Q)
    return kernels.reshaped_backup(mdp.transition, mdp.reward, mdp.gamma, 0.0, Q)


def bellman_backup_batch(mdp: TabularMdp, Qs) -> np.ndarray:
    """Vectorised backup of a stack of Q tables with shape (n, S, A)."""
    Qs = np.asarray(Qs, dtype=np.float64)
    V = Qs.max(axis=2)
    return mdp.reward[None] + mdp.gamma * np.einsum("ijk,nk->nij", mdp.transition, V)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 100_000, Q0=None):
    """Iterate the Bellman backup until ``max|V_k - V_{k-1}| < tol``.

    Returns ``(V, Q, iterations)``; raises :class:`NonConvergenceError` when
    ``max_iter`` runs out first.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    Q0 = np.zeros_like(mdp.reward) if Q0 is None else _check_q(mdp, Q0)
    Q, iters, residual, status = kernels.iterate(
        mdp.transition, mdp.reward, mdp.gamma, 0.0, Q0, tol, max_iter, True, np.inf)
    if status != kernels.CONVERGED:
        raise NonConvergenceError(f"value iteration did not converge in {max_iter} iterations",
                                  residual=residual, iterations=iters)
    return Q.max(axis=1), Q, iters


def greedy_policy(Q) -> np.ndarray:
    """Deterministic greedy policy; ties go to the lowest action index."""
    return np.argmax(np.asarray(Q), axis=1)


def greedy_sets(Q, atol: float = 1e-9) -> list:
    """Per-state set of actions within ``atol`` of the row maximum."""
    Q = np.asarray(Q)
    top = Q.max(axis=1, keepdims=True)
    return [frozenset(np.flatnonzero(row).tolist()) for row in (Q >= top - atol)]


def policy_evaluation(mdp: TabularMdp, policy) -> np.ndarray:
    """Exact Q of a deterministic policy from a linear solve."""
    policy = np.asarray(policy)
    S = mdp.n_states
    idx = np.arange(S)
    P_pi = mdp.transition[idx, policy]
    r_pi = mdp.reward[idx, policy]
    V = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi)
    return mdp.reward + mdp.gamma * mdp.transition @ V


def policy_iteration(mdp: TabularMdp, max_iter: int = 1000):
    """Howard policy iteration; an independent route to Q*."""
    policy = np.zeros(mdp.n_states, dtype=np.int64)
    for it in range(1, max_iter + 1):
        Q = policy_evaluation(mdp, policy)
        best = Q.max(axis=1, keepdims=True)
        # keep the current action unless something is strictly better
        current = Q[np.arange(mdp.n_states), policy][:, None]
        improve = (best - current).ravel() > 1e-12 * (1.0 + np.abs(best.ravel()))
        if not np.any(improve):
            return Q, policy, it
        policy = np.where(improve, np.argmax(Q, axis=1), policy)
    raise NonConvergenceError("policy iteration did not stabilise", residual=np.nan, iterations=max_iter)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
               sparse: bool = True, density: float = 0.5, n_terminal: int = 1) -> TabularMdp:
    """Random MDP with sparse {0,1} rewards and a few absorbing terminal states."""
    S, A = n_states, n_actions
    mask = rng.random((S, A, S)) < density
    mask[np.arange(S), :, rng.integers(0, S, size=S)] = True
    P = np.where(mask, rng.random((S, A, S)), 0.0)
    P /= P.sum(axis=2, keepdims=True)
    if sparse:
        r = (rng.random((S, A)) < 0.15).astype(np.float64)
    else:
        r = rng.standard_normal((S, A))
    terminal = set(rng.choice(S, size=min(n_terminal, S - 1), replace=False).tolist()) if S > 1 else set()
    for s in terminal:
        P[s] = 0.0
        P[s, :, s] = 1.0
        r[s] = 0.0
    return TabularMdp(P, r, gamma, frozenset(terminal))
