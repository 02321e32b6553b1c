"""Simulated environments, trajectories and seeded rollouts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .mdp import GridWorldSpec, TabularMdp, build_gridworld


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    next_states: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def append(self, s, a, r, s2, done):
        self.states.append(s)
        self.actions.append(a)
        self.rewards.append(float(r))
        self.next_states.append(s2)
        self.dones.append(bool(done))

    def __len__(self):
        return len(self.rewards)

    @property
    def success(self) -> bool:
        return any(r == 1.0 for r in self.rewards)

    def transitions(self):
        return zip(self.states, self.actions, self.rewards, self.next_states, self.dones)

    def discounted_return(self, gamma: float) -> float:
        return float(sum(gamma ** t * r for t, r in enumerate(self.rewards)))

    def arrays(self):
        """(s, a, r, s2, done) as numpy arrays."""
        return (np.asarray(self.states), np.asarray(self.actions), np.asarray(self.rewards, dtype=np.float64),
                np.asarray(self.next_states), np.asarray(self.dones, dtype=bool))


class TabularEnv:
    """Sampled interaction with a :class:`TabularMdp`.

    When ``goal_states`` is given the reward is the sparse event of entering a
    goal, otherwise ``mdp.reward[s, a]`` is paid.
    """

    def __init__(self, mdp: TabularMdp, start: int, max_steps: int = 100, goal_states=None):
        self.mdp = mdp
        self.start = int(start)
        self.max_steps = int(max_steps)
        self.goal_states = None if goal_states is None else frozenset(int(g) for g in goal_states)
        self._cdf = np.cumsum(mdp.transition, axis=2)
        det = mdp.transition.max(axis=2) == 1.0
        self.is_deterministic = bool(det.all())
        # successor of deterministic (s, a) pairs, -1 where sampling is needed
        self._det_next = np.where(det, mdp.transition.argmax(axis=2), -1)
        self.state = self.start
        self.t = 0

    @classmethod
    def from_gridworld(cls, spec: GridWorldSpec, max_steps: int = 100):
        env = cls(build_gridworld(spec), spec.start_state, max_steps, goal_states=[spec.goal_state])
        env.spec = spec
        return env

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    def reset(self, rng=None):
        self.state = self.start
        self.t = 0
        return self.state

    def sample_next(self, s, a, rng):
        nxt = self._det_next[s, a]
        if nxt >= 0:
            return int(nxt)
        row = self._cdf[s, a]
        s2 = int(np.searchsorted(row, rng.random(), side="right"))
        return min(s2, self.mdp.n_states - 1)

    def step(self, action, rng):
        s = self.state
        a = int(action)
        s2 = self.sample_next(s, a, rng)
        if self.goal_states is not None:
            reward = 1.0 if (s2 in self.goal_states and s not in self.mdp.terminal) else 0.0
        else:
            reward = float(self.mdp.reward[s, a])
        self.state = s2
        self.t += 1
        done = s2 in self.mdp.terminal
        return s2, reward, done


class PointMassEnv:
    """1-D or 2-D point mass: ``x' = x + clip(a)``.

    Sparse mode pays 1 once the new position lies within ``goal_radius`` of
    the goal and ends the episode; dense mode pays ``-|x' - goal|^2``.
    """

    def __init__(self, dim=2, start=None, goal_center=None, goal_radius=0.5, action_low=-1.0,
                 action_high=1.0, max_steps=50, reward_mode="sparse", bounds=None):
        if dim not in (1, 2):
            raise ConfigError("point mass dimension must be 1 or 2")
        if reward_mode not in ("sparse", "dense-quadratic"):
            raise ConfigError(f"unknown reward mode {reward_mode!r}")
        if goal_radius <= 0:
            raise ConfigError("goal_radius must be positive")
        self.dim = dim
        self.start = np.zeros(dim) if start is None else np.asarray(start, dtype=np.float64)
        self.goal_center = np.ones(dim) if goal_center is None else np.asarray(goal_center, dtype=np.float64)
        self.goal_radius = float(goal_radius)
        self.action_low = np.broadcast_to(np.asarray(action_low, dtype=np.float64), (dim,)).copy()
        self.action_high = np.broadcast_to(np.asarray(action_high, dtype=np.float64), (dim,)).copy()
        self.max_steps = int(max_steps)
        self.reward_mode = reward_mode
        # optional position box, e.g. the extent of a discretised grid
        self.bounds = None if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        self.position = self.start.copy()
        self.t = 0

    @property
    def action_dim(self):
        return self.dim

    def reset(self, rng=None):
        self.position = self.start.copy()
        self.t = 0
        return self.position.copy()

    def dynamics(self, x, a):
        """Batched transition and reward; ``x`` and ``a`` have shape (..., dim)."""
        a = np.clip(a, self.action_low, self.action_high)
        x2 = x + a
        if self.bounds is not None:
            x2 = np.clip(x2, self.bounds[0], self.bounds[1])
        dist = np.linalg.norm(x2 - self.goal_center, axis=-1)
        if self.reward_mode == "sparse":
            reward = (dist <= self.goal_radius).astype(np.float64)
        else:
            reward = -dist ** 2
        return x2, reward

    def in_goal(self, x):
        return np.linalg.norm(np.asarray(x) - self.goal_center, axis=-1) <= self.goal_radius

    def step(self, action, rng=None):
        x2, reward = self.dynamics(self.position, np.asarray(action, dtype=np.float64))
        self.position = x2
        self.t += 1
        done = self.reward_mode == "sparse" and bool(reward == 1.0)
        return x2.copy(), float(reward), done


# ---------------------------------------------------------------------------
# action sources
# ---------------------------------------------------------------------------

class PolicyTable:
    """Deterministic (S,) or stochastic (S, A) tabular policy."""

    def __init__(self, table):
        self.table = np.asarray(table)

    def act(self, state, t, rng):
        row = self.table[int(state)]
        if self.table.ndim == 1:
            return int(row)
        return int(rng.choice(row.shape[0], p=row))


class ActionSequence:
    def __init__(self, actions):
        self.actions = list(actions)

    def act(self, state, t, rng):
        if t >= len(self.actions):
            raise StopIteration
        return self.actions[t]


def rollout(env, action_source, horizon: int, rng_seed: int = 0) -> Trajectory:
    """Run one episode of at most ``horizon`` steps.

    ``action_source`` is anything exposing ``act(state, t, rng)`` (a
    :class:`PolicyTable`, an :class:`ActionSequence`, a planner agent) or a
    plain ndarray policy table. A sequence shorter than ``horizon`` ends the
    episode early.
    """
    if isinstance(action_source, np.ndarray):
        action_source = PolicyTable(action_source)
    rng = np.random.default_rng(rng_seed)
    traj = Trajectory()
    if horizon <= 0:
        return traj
    s = env.reset(rng)
    if hasattr(action_source, "reset"):
        action_source.reset()
    for t in range(horizon):
        try:
            a = action_source.act(s, t, rng)
        except StopIteration:
            break
        s2, r, done = env.step(a, rng)
        traj.append(s, a, r, s2, done)
        s = s2
        if done:
            break
    return traj
