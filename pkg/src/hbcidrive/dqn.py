"""Double deep-Q learning on the car-following world.

The learner keeps an online and a target :class:`~hbcidrive.nn.QNetwork`,
a uniform replay buffer and a linear epsilon-greedy schedule. Bootstrap
targets use the online network to pick the next action and the target
network to value it (``target_rule="double"``); ``"paper_literal"`` uses the
target network for both.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import env as envmod
from . import nn
from .metrics import DwellTracker, EpisodeLog
from .reward import OmegaPolicy, RewardWeights, frame_reward

log = logging.getLogger(__name__)

# observations are stored as uint8; 252 keeps the quarter-step gray levels exact
_QSCALE = 252.0


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s2: np.ndarray
    terminal: bool


@dataclass
class TrainConfig:
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.5
    batch_size: int = 32
    sync_every: int = 1000
    buffer_capacity: int = 100_000
    warmup: int = 1000
    total_steps: int = 200_000
    train_every: int = 1
    lr: float = 1e-4
    td_clip: float = 1.0
    target_rule: str = "double"
    omega_per_encounter: bool = True
    probe_size: int = 64
    qtrace_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.sync_every < 1:
            raise ValueError("sync_every must be >= 1")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ValueError("epsilon bounds must lie in [0, 1]")
        if self.target_rule not in ("double", "paper_literal"):
            raise ValueError(f"unknown target_rule {self.target_rule!r}")


def epsilon_at(step, config):
    """Linear decay from ``eps_start`` to ``eps_end`` over the decay window."""
    horizon = max(1.0, config.eps_decay_fraction * config.total_steps)
    frac = min(1.0, step / horizon)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


class ReplayBuffer:
    """Fixed-capacity ring of transitions with oldest-first eviction."""

    def __init__(self, capacity, obs_shape):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_shape = tuple(obs_shape)
        self.s = np.zeros((self.capacity, *self.obs_shape), dtype=np.uint8)
        self.s2 = np.zeros_like(self.s)
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity, dtype=np.float32)
        self.terminal = np.zeros(self.capacity, dtype=bool)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    @staticmethod
    def _pack(obs):
        return np.round(np.asarray(obs, dtype=np.float32) * _QSCALE).astype(np.uint8)

    def add(self, t):
        if not np.isfinite(t.r):
            raise ValueError("reward must be finite")
        i = self.inserted % self.capacity
        self.s[i] = self._pack(t.s)
        self.s2[i] = self._pack(t.s2)
        self.a[i] = int(t.a)
        self.r[i] = t.r
        self.terminal[i] = bool(t.terminal)
        self.inserted += 1

    def sample_indices(self, batch_size, rng):
        return rng.integers(0, len(self), size=batch_size)

    def batch(self, idx):
        return (self.s[idx].astype(np.float32) / _QSCALE, self.a[idx], self.r[idx],
                self.s2[idx].astype(np.float32) / _QSCALE, self.terminal[idx])

    def sample(self, batch_size, rng):
        return self.batch(self.sample_indices(batch_size, rng))


def select_action(net, obs, epsilon, rng):
    """Epsilon-greedy; greedy ties go to the lowest action index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(net.forward(obs)))


def compute_targets(batch, online, target, gamma, rule="double"):
    """Bootstrap targets ``y`` for a batch ``(s, a, r, s2, terminal)``."""
    _, _, r, s2, terminal = batch
    r = np.asarray(r, dtype=np.float64)
    if len(r) == 0:
        raise ValueError("empty batch")
    q_target = target.forward(s2).astype(np.float64)
    if rule == "double":
        chooser = online.forward(s2)
    elif rule == "paper_literal":
        chooser = q_target
    else:
        raise ValueError(f"unknown target rule {rule!r}")
    best = np.argmax(chooser, axis=1)
    bootstrap = q_target[np.arange(len(r)), best]
    return r + gamma * np.where(terminal, 0.0, bootstrap)


def td_gradient(online, batch, y, clip=1.0):
    """Loss and gradients of the squared TD error on the taken actions.

    Per-sample TD errors are clipped to ``[-clip, clip]`` before
    back-propagation; untaken actions get zero gradient.
    """
    s, a, _, _, _ = batch
    q = online.forward(s)
    idx = np.arange(len(a))
    td = q[idx, a].astype(np.float64) - y
    grad_q = np.zeros_like(q)
    grad_q[idx, a] = np.clip(td, -clip, clip) / len(a)
    grads = online.backward(grad_q)
    return float(0.5 * np.mean(td ** 2)), grads


def train_step(online, target, buffer, opt, config, rng):
    """Sample a batch, apply one update to ``online`` and return the TD loss."""
    if len(buffer) < config.batch_size:
        raise ValueError("buffer holds fewer transitions than one batch")
    batch = buffer.sample(config.batch_size, rng)
    y = compute_targets(batch, online, target, config.gamma, config.target_rule)
    loss, grads = td_gradient(online, batch, y, config.td_clip)
    nn.apply_update(online, grads, opt)
    return loss


def sync_target(online, target):
    target.load_params_from(online)
    return target


@dataclass
class TrainingResult:
    online: nn.QNetwork
    episodes: list = field(default_factory=list)
    qtrace: list = field(default_factory=list)      # (step, mean max Q)
    losses: list = field(default_factory=list)

    @property
    def run_times(self):
        return [e.run_time_s for e in self.episodes]


def _episode_seed(master, index):
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _play(net, world, labels, subject, seed, episode, epsilon, rng, weights,
          per_encounter, on_step=None, keep_going=None):
    """Shared episode loop; ``epsilon`` is a callable returning the current rate."""
    state = envmod.init_episode(world, labels, seed)
    omega = OmegaPolicy(np.random.default_rng(envmod.episode_seeds(seed)[2]),
                        per_encounter=per_encounter)
    tracker = DwellTracker(state.world, world)
    obs = envmod.observe(state)
    total = 0.0
    while not state.done and (keep_going is None or keep_going()):
        action = select_action(net, obs, epsilon(), rng)
        state, terminal, events = envmod.step(state, action)
        draws = omega.draws([e.object_id for e in events])
        reward = frame_reward(state.gap, events, draws, subject, weights,
                              world.min_gap, world.max_gap).total
        tracker.update(state.passenger.position)
        next_obs = envmod.observe(state)
        total += reward
        if on_step is not None:
            on_step(obs, action, reward, next_obs, terminal, state)
        obs = next_obs
    cause = state.cause or "step_limit"
    return EpisodeLog(episode, state.step_count, state.elapsed, total, cause,
                      tracker.close())


def rollout(net, world, labels, subject, seed, episode=0, epsilon=0.0, rng=None,
            weights=RewardWeights(), per_encounter=True, on_step=None, max_steps=None):
    """Run one episode with an epsilon-greedy policy and return its :class:`EpisodeLog`.

    ``on_step(obs, action, reward, next_obs, terminal, state)`` is called
    after every transition.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    steps = [0]

    def counting(*args):
        steps[0] += 1
        if on_step is not None:
            on_step(*args)

    keep_going = None if max_steps is None else (lambda: steps[0] < max_steps)
    return _play(net, world, labels, subject, seed, episode, lambda: epsilon, rng,
                 weights, per_encounter, counting, keep_going)


def probe_observations(world, labels, n, seed):
    """Observations from random-policy rollouts, used to trace Q-values."""
    rng = np.random.default_rng(seed)
    obs = []
    ep = 0
    while len(obs) < n:
        state = envmod.init_episode(world, labels, _episode_seed(seed, 10_000 + ep))
        ep += 1
        while not state.done and len(obs) < n:
            state, _, _ = envmod.step(state, int(rng.integers(3)))
            if rng.random() < 0.2:
                obs.append(envmod.observe(state))
    return np.stack(obs)


def run_training(world, labels, subject, config, arch=nn.DESK_ARCH,
                 weights=RewardWeights(), progress=None):
    """Train a double-DQN driver and return the network plus its logs.

    Episodes use seeds derived from ``config.seed``; the whole run is a
    deterministic function of its arguments.
    """
    if arch.input_shape != (3, world.frame_size, world.frame_size):
        raise ValueError("network input does not match the world frame size")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    net_seed = int(seeds[0].generate_state(1)[0])
    act_rng = np.random.default_rng(seeds[1])
    learn_rng = np.random.default_rng(seeds[2])
    online = nn.QNetwork(arch, seed=net_seed)
    target = online.copy()
    opt = nn.OptimizerState(lr=config.lr)
    buffer = ReplayBuffer(config.buffer_capacity, arch.input_shape)
    probe = probe_observations(world, labels, config.probe_size, config.seed + 7919)
    result = TrainingResult(online)
    counter = {"t": 0}

    def on_step(obs, action, reward, next_obs, terminal, state):
        buffer.add(Transition(obs, action, reward, next_obs, terminal))
        counter["t"] += 1
        t = counter["t"]
        if t >= config.warmup and len(buffer) >= config.batch_size \
                and t % config.train_every == 0:
            result.losses.append(train_step(online, target, buffer, opt, config, learn_rng))
        if t % config.sync_every == 0:
            sync_target(online, target)
        if t % config.qtrace_every == 0:
            result.qtrace.append((t, float(online.forward(probe).max(axis=1).mean())))

    episode = 0
    while counter["t"] < config.total_steps:
        log_ = _play(online, world, labels, subject, _episode_seed(config.seed, episode),
                     episode, lambda: epsilon_at(counter["t"], config), act_rng, weights,
                     config.omega_per_encounter, on_step,
                     lambda: counter["t"] < config.total_steps)
        result.episodes.append(log_)
        if progress is not None:
            progress(log_, counter["t"], epsilon_at(counter["t"], config))
        episode += 1
    return result


def evaluate(net, world, labels, subject, n_episodes, seed=10_000,
             weights=RewardWeights(), per_encounter=True):
    """Greedy (epsilon = 0) rollouts on fresh episode seeds."""
    return [rollout(net, world, labels, subject, _episode_seed(seed, k), episode=k,
                    epsilon=0.0, weights=weights, per_encounter=per_encounter)
            for k in range(n_episodes)]


def write_qtrace(qtrace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_max_q"])
        for stepno, q in qtrace:
            w.writerow([stepno, f"{q:.6f}"])
