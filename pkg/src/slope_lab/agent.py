"""Tabular learners with shaped rewards and the three-phase training pipeline.

Randomness protocol (one ``np.random.Generator`` per training run, consumed in
this order): seed rollouts draw actions from the behaviour-cloned prior;
every update batch draws its demo indices, then its replay indices (the
demo share per batch comes from :class:`DemoMixer`); every
environment step draws one exploration uniform, one random action if
exploring (or one tie-break index when greedy actions tie), then one
transition uniform unless the transition is deterministic. Evaluation episodes use their own
generator keyed by ``(seed, 1, episode)`` so evaluating never perturbs
training.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .distval import Support, expectation, softmax, two_hot_encode
from .envs import TabularEnv, Trajectory
from .errors import ConfigError, ContractError, DivergenceError
from .mdp import greedy_policy
from .shaping import (BootstrappedPotential, NoPotential, gaussian_smooth_rewards, potential_table)


# ---------------------------------------------------------------------------
# buffers
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO ring of (s, a, r, s', done)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros(capacity, dtype=np.int64)
        self.done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, s, a, r, s2, done):
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, transitions):
        for tr in transitions:
            self.add(*tr)

    def ordered_indices(self):
        """Storage slots from oldest to newest."""
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def transitions(self):
        idx = self.ordered_indices()
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def take(self, idx):
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def sample(self, n, rng):
        return self.take(rng.integers(0, self._size, size=n))


class DemoMixer:
    """Demo share of successive update batches.

    Batch ``k`` takes ``floor((k+1) r B) - floor(k r B)`` demo elements, so the
    running demo fraction stays within ``1/(kB)`` of ``r`` for any ratio. When
    ``r B`` is an integer every batch gets exactly ``r B``. Draws no randomness.
    """

    def __init__(self, ratio: float, batch_size: int):
        self.ratio = float(ratio)
        self.batch_size = int(batch_size)
        self.k = 0

    def _cum(self, k):
        return int(np.floor(k * self.ratio * self.batch_size + 1e-9))

    def next(self) -> int:
        n = self._cum(self.k + 1) - self._cum(self.k)
        self.k += 1
        return n


class DemoBuffer:
    """Demonstrations plus successful trajectories added during training."""

    def __init__(self, trajectories=(), reward_transform=None):
        self.trajectories = []
        self.augmentation_count = 0
        self._reward_transform = reward_transform
        self._arrays = None
        for traj in trajectories:
            self.add(traj, augmented=False)

    def __len__(self):
        return len(self.trajectories)

    def add(self, traj: Trajectory, augmented=True):
        if augmented and not traj.success:
            raise ValueError("only successful trajectories may be added to the demo buffer")
        if len(traj) == 0:
            return
        self.trajectories.append((traj, augmented))
        self.augmentation_count += int(augmented)
        self._arrays = None

    @property
    def n_transitions(self):
        return sum(len(t) for t, _ in self.trajectories)

    def arrays(self):
        if self._arrays is None:
            parts = [_trajectory_arrays(t, self._reward_transform) for t, _ in self.trajectories]
            if parts:
                self._arrays = tuple(np.concatenate(col) for col in zip(*parts))
            else:
                self._arrays = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0),
                                np.zeros(0, np.int64), np.zeros(0, bool))
        return self._arrays

    def sample(self, n, rng):
        cols = self.arrays()
        idx = rng.integers(0, len(cols[0]), size=n)
        return tuple(c[idx] for c in cols)

    def augmented(self):
        return [t for t, aug in self.trajectories if aug]


def _trajectory_arrays(traj, reward_transform=None):
    s, a, r, s2, d = traj.arrays()
    if reward_transform is not None:
        r = reward_transform(r)
    return s.astype(np.int64), a.astype(np.int64), r, s2.astype(np.int64), d


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.95
    eta: float = 1.0
    quantile_tau: float = 0.55
    value_mode: str = "distributional"  # or "scalar"
    lr: float = 0.5
    dist_lr: float = 1.0
    epsilon: float = 0.1
    demo_sampling_ratio: float = 0.5
    batch_size: int = 16
    updates_per_step: int = 1
    episodes: int = 300
    eval_interval: int = 5
    eval_episodes: int = 10
    max_steps: int = 100
    seed_rollouts: int = 10
    pretrain_updates: int = 50
    replay_capacity: int = 100_000
    n_bins: int = 101
    # value support; None means [0, 1/(1-gamma)]
    v_min: float | None = -1.0
    v_max: float | None = 2.0
    sync_every: int = 100
    augment_demos: bool = True
    warm_start: bool = True
    # "bootstrapped" (eta * max Q), "none", "similarity", "entropy", "smoothed"
    shaping: str = "bootstrapped"
    similarity_bandwidth: float = 1.0
    entropy_temperature: float = 1.0
    smoothing_sigma: float = 8.0
    success_threshold: float = 0.9
    stop_on_success: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if not 0.5 <= self.quantile_tau <= 1.0:
            raise ConfigError("quantile_tau must lie in [0.5, 1]")
        if self.value_mode not in ("scalar", "distributional"):
            raise ConfigError(f"unknown value mode {self.value_mode!r}")
        if not 0.0 <= self.epsilon <= 1.0 or not 0.0 <= self.demo_sampling_ratio <= 1.0:
            raise ConfigError("epsilon and demo_sampling_ratio must lie in [0, 1]")
        if self.lr <= 0 or self.dist_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if min(self.batch_size, self.episodes, self.eval_interval, self.eval_episodes, self.max_steps,
               self.sync_every) < 1:
            raise ConfigError("batch_size, episodes, eval_interval, eval_episodes, max_steps, sync_every must be >= 1")
        if self.shaping not in ("bootstrapped", "none", "similarity", "entropy", "smoothed"):
            raise ConfigError(f"unknown shaping variant {self.shaping!r}")

    @property
    def support(self) -> Support:
        if self.v_min is None or self.v_max is None:
            return Support.for_discount(self.gamma, self.n_bins)
        return Support(float(self.v_min), float(self.v_max), self.n_bins)

    def with_(self, **kw) -> "LearnerConfig":
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# value tables
# ---------------------------------------------------------------------------

class ScalarQ:
    def __init__(self, n_states, n_actions):
        self.table = np.zeros((n_states, n_actions))

    def values(self):
        return self.table

    def row(self, s):
        return self.table[s]

    def update(self, batch, config: LearnerConfig, eta, phi_static=None):
        s, a, r, s2, d = batch
        if phi_static is not None:
            r = r + config.gamma * np.where(d, 0.0, phi_static[s2]) - phi_static[s]
        kernels.scalar_updates(self.table, s, a, r, s2, d, config.gamma, eta, config.lr)


class DistributionalQ:
    """Per-(s, a) categorical logits trained with the QCE loss.

    The next-state value and potential read a target copy synced every
    ``sync_every`` updates; the current-state potential reads the online table.
    """

    def __init__(self, n_states, n_actions, support: Support, init_value=0.0, init_mass=0.99):
        self.support = support
        p = init_mass * two_hot_encode(init_value, support) + (1.0 - init_mass) / support.n_bins
        self.logits = np.ascontiguousarray(np.broadcast_to(np.log(p), (n_states, n_actions, support.n_bins)))
        self.target = self.logits.copy()
        self.counter = 0

    def values(self):
        return expectation(softmax(self.logits), self.support)

    def row(self, s):
        return expectation(softmax(self.logits[s]), self.support)

    def update(self, batch, config: LearnerConfig, eta, phi_static=None):
        s, a, r, s2, d = batch
        if phi_static is not None:
            r = r + config.gamma * np.where(d, 0.0, phi_static[s2]) - phi_static[s]
        sup = self.support
        self.counter = kernels.dist_updates(self.logits, self.target, s, a, r, s2, d, config.gamma, eta,
                                            config.dist_lr, config.quantile_tau, sup.centers, sup.vmin,
                                            sup.vmax, self.counter, config.sync_every)


def make_value(config: LearnerConfig, n_states, n_actions):
    if config.value_mode == "scalar":
        return ScalarQ(n_states, n_actions)
    return DistributionalQ(n_states, n_actions, config.support)


def _split_potential(pot):
    """(eta for the in-kernel bootstrapped term, whether a static table is needed)."""
    if isinstance(pot, NoPotential) or pot is None:
        return 0.0, False
    if isinstance(pot, BootstrappedPotential):
        return float(pot.eta), False
    return 0.0, True


def q_learning_step(Q, transition, pot, config: LearnerConfig, context=None):
    """Apply one shaped TD update and return the (in-place updated) value table.

    ``Q`` is a scalar table (S, A), a :class:`ScalarQ` or a
    :class:`DistributionalQ`. The bootstrapped potential reads the current
    table; other potentials are evaluated with ``context`` (defaults to Q).
    """
    s, a, r, s2, done = transition
    batch = (np.array([s], np.int64), np.array([a], np.int64), np.array([r], float),
             np.array([s2], np.int64), np.array([done], bool))
    target = ScalarQ.__new__(ScalarQ) if isinstance(Q, np.ndarray) else Q
    if isinstance(Q, np.ndarray):
        target.table = Q
    eta, needs_table = _split_potential(pot)
    phi = None
    if needs_table:
        ctx = target.values() if context is None else context
        phi = potential_table(pot, ctx, target.values().shape[0])
    target.update(batch, config, eta, phi)
    return Q


# ---------------------------------------------------------------------------
# acting and evaluation
# ---------------------------------------------------------------------------

def epsilon_greedy(row, epsilon, rng):
    """Explore with probability epsilon; ties among greedy actions are broken
    uniformly (drawing from ``rng`` only when a tie exists)."""
    if rng.random() < epsilon:
        return int(rng.integers(row.shape[0]))
    best = np.flatnonzero(row == row.max())
    if best.size == 1:
        return int(best[0])
    return int(best[rng.integers(best.size)])


def run_episode(env: TabularEnv, choose, rng, max_steps, on_step=None) -> Trajectory:
    traj = Trajectory()
    s = env.reset()
    for _ in range(max_steps):
        a = choose(s)
        s2, r, done = env.step(a, rng)
        traj.append(s, a, r, s2, done)
        if on_step is not None:
            on_step(s, a, r, s2, done)
        s = s2
        if done:
            break
    return traj


def evaluate(env, value, n_episodes, max_steps, seed, episode) -> float:
    """Success rate of the greedy policy (lowest index on ties)."""
    rng = np.random.default_rng([seed, 1, episode])
    if env.is_deterministic:
        # every greedy episode is identical
        traj = run_episode(env, lambda s: int(np.argmax(value.row(s))), rng, max_steps)
        return float(traj.success)
    wins = 0
    for _ in range(n_episodes):
        traj = run_episode(env, lambda s: int(np.argmax(value.row(s))), rng, max_steps)
        wins += traj.success
    return wins / n_episodes


def behavior_prior(demos: DemoBuffer, n_states, n_actions) -> np.ndarray:
    """Empirical action frequencies per state; uniform where no demo visits."""
    counts = np.zeros((n_states, n_actions))
    for traj, _ in demos.trajectories:
        for s, a in zip(traj.states, traj.actions):
            counts[s, a] += 1
    tot = counts.sum(axis=1, keepdims=True)
    return np.where(tot > 0, counts / np.maximum(tot, 1), 1.0 / n_actions)


def expert_demos(env: TabularEnv, Q_star, n, rng, epsilon=0.2, max_steps=None, max_tries=1000):
    """Successful episodes of an epsilon-perturbed greedy expert."""
    out = []
    max_steps = env.max_steps if max_steps is None else max_steps
    for _ in range(max_tries):
        if len(out) == n:
            break
        traj = run_episode(env, lambda s: epsilon_greedy(Q_star[s], epsilon, rng), rng, max_steps)
        if traj.success:
            out.append(traj)
    if len(out) < n:
        raise RuntimeError("expert failed to produce enough successful demonstrations")
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: np.ndarray
    values: np.ndarray
    curve: list
    events: list
    demos: DemoBuffer
    replay: ReplayBuffer
    snapshots: dict = field(default_factory=dict)

    def episodes_to(self, threshold=0.9):
        """First evaluated episode with success rate >= threshold, else inf."""
        for row in self.curve:
            if row["success_rate"] >= threshold:
                return row["episode"]
        return float("inf")

    @property
    def final_success(self):
        return self.curve[-1]["success_rate"] if self.curve else 0.0

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "success_rate", "mean_Q", "demo_size", "replay_size"])
        for row in self.curve:
            w.writerow([row["episode"], repr(row["success_rate"]), repr(row["mean_Q"]), row["demo_size"],
                        row["replay_size"]])
        return buf.getvalue()

    def events_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "event", "detail"])
        for ev in self.events:
            w.writerow([ev["episode"], ev["event"], ev.get("detail", "")])
        return buf.getvalue()


def _potential_for(config: LearnerConfig, env: TabularEnv):
    if config.shaping == "bootstrapped":
        return BootstrappedPotential(config.eta) if config.eta > 0 else NoPotential()
    if config.shaping == "similarity":
        from .shaping import SimilarityPotential
        spec = getattr(env, "spec", None)
        if spec is not None:
            feats = np.array([spec.cell(s) for s in range(env.n_states)], dtype=np.float64)
        else:
            feats = np.arange(env.n_states, dtype=np.float64)[:, None]
        return SimilarityPotential(feats, config.similarity_bandwidth)
    if config.shaping == "entropy":
        from .shaping import EntropyPotential
        return EntropyPotential(config.entropy_temperature)
    return NoPotential()


def three_phase_train(env: TabularEnv, demos, config: LearnerConfig, rng_seed: int = 0,
                      snapshot_episodes=()) -> TrainResult:
    """Behaviour-cloned prior, seeded value learning, then shaped interaction.

    ``demos`` is a :class:`DemoBuffer` or a list of trajectories. Value tables
    are copied at the end of every episode listed in ``snapshot_episodes``
    (episode 0 is the table before any update).
    """
    rng = np.random.default_rng(rng_seed)
    smooth = None
    if config.shaping == "smoothed":
        sigma = config.smoothing_sigma

        def smooth(r):
            out = gaussian_smooth_rewards(r, sigma)
            if abs(float(out.sum()) - float(np.sum(r))) >= 1e-9:
                raise ContractError("reward smoothing changed a trajectory's total")
            return out
    initial = demos.trajectories if isinstance(demos, DemoBuffer) else [(t, False) for t in demos]
    demo_buf = DemoBuffer(reward_transform=smooth)
    for traj, _ in initial:
        demo_buf.add(traj, augmented=False)
    S, A = env.n_states, env.n_actions
    value = make_value(config, S, A)
    pot = _potential_for(config, env)
    eta, needs_table = _split_potential(pot)
    archive = np.zeros(S, dtype=bool)  # visited states, for the similarity potential
    events = []
    snapshots = {}
    snap = set(snapshot_episodes)
    if 0 in snap:
        snapshots[0] = value.values().copy()

    def phi_table():
        if not needs_table:
            return None
        if pot.kind == "similarity":
            return potential_table(pot, np.flatnonzero(archive))
        return potential_table(pot, value.values())

    def check_finite(episode):
        if not np.all(np.isfinite(value.values())):
            events.append({"episode": episode, "event": "abort", "detail": "non-finite value table"})
            raise DivergenceError(f"value table became non-finite at episode {episode}")

    # phase 1: behaviour cloning
    if len(demo_buf) == 0:
        events.append({"episode": 0, "event": "skip", "detail": "no demonstrations; phases 1-2 skipped"})
        prior = np.full((S, A), 1.0 / A)
        seed_trajs = []
    else:
        prior = behavior_prior(demo_buf, S, A)
        events.append({"episode": 0, "event": "phase1", "detail": f"prior from {len(demo_buf)} demos"})
        for traj, _ in demo_buf.trajectories:
            archive[np.asarray(traj.states)] = True
            archive[np.asarray(traj.next_states)] = True
        # phase 2: seed rollouts with the prior, then value updates on demo + seed data
        seed_trajs = []
        for _ in range(config.seed_rollouts):
            traj = run_episode(env, lambda s: int(rng.choice(A, p=prior[s])), rng, config.max_steps)
            seed_trajs.append(traj)
    seed_cols = [_trajectory_arrays(t, smooth) for t in seed_trajs if len(t)]
    replay = ReplayBuffer(config.replay_capacity)
    for cols in seed_cols:
        for tr in zip(*cols):
            replay.add(*tr)
    for traj in seed_trajs:
        archive[np.asarray(traj.states, dtype=np.int64)] = True
        archive[np.asarray(traj.next_states, dtype=np.int64)] = True
    if len(demo_buf):
        pool = tuple(np.concatenate(c) for c in zip(demo_buf.arrays(), *seed_cols)) if seed_cols \
            else demo_buf.arrays()
        for _ in range(config.pretrain_updates):
            idx = rng.integers(0, len(pool[0]), size=config.batch_size)
            value.update(tuple(c[idx] for c in pool), config, eta, phi_table())
        events.append({"episode": 0, "event": "phase2",
                       "detail": f"{len(seed_trajs)} seed rollouts, {config.pretrain_updates} updates"})
        check_finite(0)

    # phase 3: interactive learning
    mixer = DemoMixer(config.demo_sampling_ratio, config.batch_size)
    curve = []

    def update_batch():
        if len(demo_buf) and len(replay):
            n_demo = mixer.next()
            d = demo_buf.sample(n_demo, rng)
            b = replay.sample(config.batch_size - n_demo, rng)
            batch = tuple(np.concatenate(pair) for pair in zip(d, b))
        elif len(replay):
            batch = replay.sample(config.batch_size, rng)
        elif len(demo_buf):
            batch = demo_buf.sample(config.batch_size, rng)
        else:
            return
        value.update(batch, config, eta, phi_table())

    pending = []

    def on_step(s, a, r, s2, done):
        archive[s2] = True
        if smooth is None:
            replay.add(s, a, r, s2, done)
            for _ in range(config.updates_per_step):
                update_batch()
        else:
            # smoothing needs the whole episode; store and update at episode end
            pending.append((s, a, r, s2, done))

    live = np.array([s for s in range(S) if s not in env.mdp.terminal], dtype=np.int64)

    def record(episode):
        """Evaluate greedily; True when training should stop."""
        rate = evaluate(env, value, config.eval_episodes, config.max_steps, rng_seed, episode)
        curve.append({"episode": episode, "success_rate": rate, "mean_Q": float(value.values()[live].mean()),
                      "demo_size": demo_buf.n_transitions, "replay_size": len(replay)})
        if config.stop_on_success and rate >= config.success_threshold:
            events.append({"episode": episode, "event": "stop", "detail": f"success {rate}"})
            return True
        return False

    # episode 0 is the greedy policy after phases 1-2
    stopped = record(0)
    for episode in range(1, config.episodes + 1):
        if stopped:
            break
        traj = run_episode(env, lambda s: epsilon_greedy(value.row(s), config.epsilon, rng), rng,
                           config.max_steps, on_step)
        if smooth is not None and pending:
            s, a, r, s2, d = (np.array(c) for c in zip(*pending))
            for tr in zip(s, a, smooth(r), s2, d):
                replay.add(*tr)
            for _ in range(config.updates_per_step * len(pending)):
                update_batch()
            pending.clear()
        check_finite(episode)
        if traj.success and config.augment_demos:
            demo_buf.add(traj, augmented=True)
            events.append({"episode": episode, "event": "augment", "detail": f"length {len(traj)}"})
        if episode in snap:
            snapshots[episode] = value.values().copy()
        if episode % config.eval_interval == 0:
            stopped = record(episode)
    vals = value.values()
    return TrainResult(greedy_policy(vals), vals.copy(), curve, events, demo_buf, replay, snapshots)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATIONS = {
    "full": {},
    "no_shaping": {"eta": 0.0},
    "no_optimism": {"quantile_tau": 0.5},
    "no_demo_aug": {"augment_demos": False},
    # tabular acting is epsilon-greedy, so this variant only differs under planner-driven acting
    "no_warm_start": {"warm_start": False},
}


def _median(xs):
    return float(np.median(np.asarray(xs, dtype=np.float64))) if len(xs) else float("nan")


def paired_runs(env, demos, config: LearnerConfig, seeds, threshold=None):
    """Train once per seed; returns per-seed episodes-to-threshold, final success and curves."""
    threshold = config.success_threshold if threshold is None else threshold
    out = {"seeds": list(seeds), "episodes_to_success": [], "final_success": [], "curves": []}
    for seed in seeds:
        res = three_phase_train(env, demos, config, int(seed))
        out["episodes_to_success"].append(res.episodes_to(threshold))
        out["final_success"].append(res.final_success)
        out["curves"].append(res.curve)
    out["median_episodes_to_success"] = _median(out["episodes_to_success"])
    out["median_final_success"] = _median(out["final_success"])
    return out


def ablation_suite(env, demos, base_config: LearnerConfig, rng_seed=0, n_seeds=20, variants=None):
    """Paired-seed comparison of the full learner and its ablations.

    Seeds are ``rng_seed, rng_seed + 1, ...`` for every variant, so seed ``i``
    sees the same demonstrations and environment noise stream everywhere.
    """
    seeds = [rng_seed + i for i in range(n_seeds)]
    names = list(ABLATIONS) if variants is None else list(variants)
    table = {}
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {name!r}")
        cfg = base_config.with_(**ABLATIONS[name])
        table[name] = paired_runs(env, demos, cfg, seeds)
        table[name]["config"] = cfg.to_dict()
    return table


def ablation_summary(table) -> dict:
    """JSON-friendly per-variant medians (inf is reported as None)."""
    def clean(x):
        return None if not np.isfinite(x) else x
    return {name: {"median_episodes_to_success": clean(row["median_episodes_to_success"]),
                   "median_final_success": row["median_final_success"],
                   "episodes_to_success": [clean(float(v)) for v in row["episodes_to_success"]],
                   "final_success": row["final_success"]}
            for name, row in table.items()}
