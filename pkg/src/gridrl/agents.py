"""Deep Q-learning with a two-hidden-layer ReLU network in plain numpy, and a
tabular Q-learning baseline on the two-area pseudo state.

Network convention: ``W`` has shape (fan_out, fan_in); batches are rows.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import dynsim
from .mdpenv import ConfigError, ContractViolation, EnvConfig, GridEnv, ScenarioSampler

CHECKPOINT_FORMAT = "gridrl-mlp"
CHECKPOINT_VERSION = 1


class TrainingFault(RuntimeError):
    """Non-finite loss/gradient or an environment failure during training."""

    def __init__(self, message: str, log: "TrainingLog | None" = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.log = log
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MlpParameters:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "MlpParameters":
        return MlpParameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def allclose(self, other: "MlpParameters", atol: float = 0.0) -> bool:
        return all(np.allclose(a, b, rtol=0, atol=atol) for a, b in
                   zip(self.weights + self.biases, other.weights + other.biases))

    def __eq__(self, other):
        return isinstance(other, MlpParameters) and self.sizes == other.sizes and self.allclose(other)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> MlpParameters:
    """Uniform(-scale/sqrt(fan_in), scale/sqrt(fan_in)) weights, zero biases."""
    if len(sizes) != 4:
        raise ContractViolation("expected (N_i, N_h1, N_h2, N_o)")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = scale / math.sqrt(fan_in)
        ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParameters(ws, bs)


def _forward(params: MlpParameters, x: np.ndarray):
    W1, W2, W3 = params.weights
    b1, b2, b3 = params.biases
    z1 = x @ W1.T + b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ W2.T + b2
    h2 = np.maximum(z2, 0.0)
    q = h2 @ W3.T + b3
    return q, (x, z1, h1, z2, h2)


def mlp_forward(params: MlpParameters, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n_i = params.weights[0].shape[1]
    if x.shape[-1] != n_i or x.ndim > 2:
        raise ContractViolation(f"input shape {x.shape} does not match N_i={n_i}")
    return _forward(params, x)[0]


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.actions)


def dqn_targets(target_params: MlpParameters, batch: Batch, gamma: float) -> np.ndarray:
    q_next = mlp_forward(target_params, batch.next_states).max(axis=1)
    return batch.rewards + gamma * np.where(batch.dones > 0, 0.0, q_next)


def dqn_loss_and_gradient(params: MlpParameters, target_params: MlpParameters, batch: Batch,
                          gamma: float) -> tuple[float, MlpParameters]:
    """Mean squared TD error and its gradient w.r.t. ``params`` (targets held fixed)."""
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    if target_params.sizes != params.sizes:
        raise ContractViolation("target network shape mismatch")
    y = dqn_targets(target_params, batch, gamma)
    q, (x, z1, h1, z2, h2) = _forward(params, batch.states)
    n = len(batch)
    idx = np.arange(n)
    a = batch.actions.astype(int)
    err = q[idx, a] - y
    loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise TrainingFault("non-finite loss", diagnostics={"max_abs_q": float(np.nanmax(np.abs(q))),
                                                            "max_abs_target": float(np.max(np.abs(y)))})
    W1, W2, W3 = params.weights
    dq = np.zeros_like(q)
    dq[idx, a] = 2.0 * err / n
    gW3 = dq.T @ h2
    gb3 = dq.sum(axis=0)
    dh2 = dq @ W3
    dz2 = dh2 * (z2 > 0)
    gW2 = dz2.T @ h1
    gb2 = dz2.sum(axis=0)
    dh1 = dz2 @ W2
    dz1 = dh1 * (z1 > 0)
    gW1 = dz1.T @ x
    gb1 = dz1.sum(axis=0)
    grads = MlpParameters([gW1, gW2, gW3], [gb1, gb2, gb3])
    if not all(np.all(np.isfinite(g)) for g in grads.weights + grads.biases):
        raise TrainingFault("non-finite gradient", diagnostics={"loss": loss})
    return loss, grads


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Sgd:
    """theta <- theta - lr * grad."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: MlpParameters, grads: MlpParameters) -> MlpParameters:
        return MlpParameters([w - self.lr * g for w, g in zip(params.weights, grads.weights)],
                             [b - self.lr * g for b, g in zip(params.biases, grads.biases)])


class Adam:
    """Adaptive-moment rule with bias correction (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: MlpParameters, grads: MlpParameters) -> MlpParameters:
        p = params.weights + params.biases
        g = grads.weights + grads.biases
        if self.m is None:
            self.m = [np.zeros_like(a) for a in p]
            self.v = [np.zeros_like(a) for a in p]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (a, gi) in enumerate(zip(p, g)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * gi
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * gi * gi
            out.append(a - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        k = len(params.weights)
        return MlpParameters(out[:k], out[k:])


def make_optimizer(name: str, lr: float):
    if name in ("adam", "adaptive-moment"):
        return Adam(lr)
    if name in ("sgd", "plain-sgd"):
        return Sgd(lr)
    raise ConfigError(f"unknown optimizer {name!r}")


def optimizer_step(params: MlpParameters, grads: MlpParameters, optimizer) -> MlpParameters:
    return optimizer.step(params, grads)


# ---------------------------------------------------------------------------
# configuration, exploration, replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 150_000
    learning_rate: float = 1e-4
    gamma: float = 0.99
    target_sync: int = 500
    batch_size: int = 32
    eps_min: float = 0.02
    eps_decay_steps: int | None = None      # default: 10 % of total_steps
    buffer_capacity: int = 50_000
    optimizer: str = "adam"
    seed: int = 0
    hidden: tuple[int, int] = (128, 128)
    learning_starts: int = 1000
    train_freq: int = 1
    reward_scale: float = 1.0
    log_window: int = 100
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 < self.eps_min <= 1.0:
            raise ConfigError("eps_min must lie in (0, 1]")
        for k in ("target_sync", "batch_size", "buffer_capacity", "train_freq", "log_window"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive")
        if self.total_steps < 0 or self.learning_starts < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.learning_rate <= 0 or self.reward_scale <= 0:
            raise ConfigError("learning_rate and reward_scale must be positive")
        make_optimizer(self.optimizer, self.learning_rate)

    @property
    def decay_steps(self) -> int:
        if self.eps_decay_steps is not None:
            return max(int(self.eps_decay_steps), 1)
        return max(int(0.1 * self.total_steps), 1)

    @classmethod
    def from_mapping(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown dqn keys {sorted(bad)}")
        return cls(**d)


def epsilon_at(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise ContractViolation("negative step")
    n = config.decay_steps
    if step >= n:
        return config.eps_min
    return 1.0 + (config.eps_min - 1.0) * step / n


def select_action(params: MlpParameters, state, eps: float, rng: np.random.Generator) -> int:
    """ε-greedy; greedy ties go to the lowest index."""
    if not 0.0 <= eps <= 1.0:
        raise ContractViolation("epsilon outside [0, 1]")
    n_o = params.weights[-1].shape[0]
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(n_o))
    return int(np.argmax(mlp_forward(params, state)))


def greedy_action(params: MlpParameters, state) -> int:
    return int(np.argmax(mlp_forward(params, state)))


class ReplayBuffer:
    """Fixed-capacity ring of (s, a, r, s', done); FIFO eviction."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity <= 0:
            raise ContractViolation("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.d = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done) -> "ReplayBuffer":
        i = self._next
        self.s[i] = s; self.a[i] = a; self.r[i] = r; self.s2[i] = s2; self.d[i] = float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self

    def items(self) -> list[tuple]:
        """Stored transitions, oldest first."""
        start = self._next if self.size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.size)]
        return [(self.s[i].copy(), int(self.a[i]), float(self.r[i]), self.s2[i].copy(), bool(self.d[i]))
                for i in order]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size or batch_size <= 0:
            raise ContractViolation(f"cannot sample {batch_size} from {self.size} transitions")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx])


def replay_add(buffer: ReplayBuffer, transition) -> ReplayBuffer:
    return buffer.add(*transition)


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(batch_size, rng)


# ---------------------------------------------------------------------------
# checkpoints and logs
# ---------------------------------------------------------------------------

def params_to_dict(params: MlpParameters, meta: dict | None = None) -> dict:
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "sizes": list(params.sizes),
            "layers": [{"W": w.ravel().tolist(), "b": b.tolist()}
                       for w, b in zip(params.weights, params.biases)],
            "meta": meta or {}}


def params_from_dict(d: dict) -> MlpParameters:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError("not a gridrl checkpoint (format/version mismatch)")
    sizes = d["sizes"]
    ws, bs = [], []
    for (fi, fo), layer in zip(zip(sizes[:-1], sizes[1:]), d["layers"]):
        ws.append(np.array(layer["W"], dtype=float).reshape(fo, fi))
        bs.append(np.array(layer["b"], dtype=float))
    return MlpParameters(ws, bs)


def save_checkpoint(path, params: MlpParameters, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, meta)))


def load_checkpoint(path) -> tuple[MlpParameters, dict]:
    d = json.loads(Path(path).read_text())
    return params_from_dict(d), d.get("meta", {})


@dataclass
class TrainingLog:
    window: int = 100
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    best_moving_average: float = -math.inf
    best_params: MlpParameters | None = None
    best_episode: int = -1

    def add(self, steps: int, reward: float) -> float:
        rewards = [r[2] for r in self.rows[-(self.window - 1):]] + [reward] if self.window > 1 else [reward]
        ma = float(np.mean(rewards))
        self.rows.append((len(self.rows) + 1, steps, float(reward), ma))
        return ma

    @property
    def episode_rewards(self) -> list[float]:
        return [r[2] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "steps", "reward", "moving_average"])
            for row in self.rows:
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class VectorEnv(Protocol):
    n_inputs: int
    n_actions: int

    def reset(self) -> np.ndarray: ...
    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]: ...


class ScenarioTrainingEnv:
    """Adapts :class:`GridEnv` to the vector protocol, drawing a fresh scenario per episode."""

    def __init__(self, config: EnvConfig, sampler: ScenarioSampler, seed: int = 0,
                 noise_sigma: float = 0.0):
        self.env = GridEnv(config)
        self.sampler = sampler
        self.rng = np.random.default_rng(seed)
        self.noise_sigma = noise_sigma
        self.n_inputs = config.n_i
        self.n_actions = config.n_o
        self.scenario = None

    def reset(self) -> np.ndarray:
        self.scenario = self.sampler.sample(self.rng, self.noise_sigma)
        self.env.reset(self.scenario)
        return self.env.state_vector()

    def step(self, action: int):
        _, r, done, info = self.env.step(action)
        return self.env.state_vector(), r, done, info


def train_dqn(env_factory: Callable[[], VectorEnv], config: TrainConfig,
              checkpoint_path=None, log_path=None,
              progress: Callable[[int, TrainingLog], None] | None = None,
              on_step: Callable[[int, MlpParameters, MlpParameters], None] | None = None,
              ) -> tuple[MlpParameters, TrainingLog]:
    """Algorithm-1 deep Q-learning.

    Returns the parameters with the best ``log_window``-episode moving average
    (the final parameters if fewer episodes were completed) and the log.
    ``on_step(step, online, target)`` observes the networks after every step.
    """
    rng = np.random.default_rng(config.seed)
    env = env_factory()
    sizes = (env.n_inputs, *config.hidden, env.n_actions)
    params = init_mlp(sizes, rng, config.init_scale)
    target = params.copy()
    log = TrainingLog(window=config.log_window)
    if config.total_steps == 0:
        return params, log
    opt = make_optimizer(config.optimizer, config.learning_rate)
    buf = ReplayBuffer(config.buffer_capacity, env.n_inputs)
    meta = {"sizes": list(sizes), "seed": config.seed}

    def _persist():
        if log_path:
            log.write_csv(log_path)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, log.best_params or params, meta)

    step = 0
    try:
        s = env.reset()
        ep_reward, ep_steps = 0.0, 0
        for step in range(config.total_steps):
            eps = epsilon_at(step, config)
            a = select_action(params, s, eps, rng)
            s2, r, done, _ = env.step(a)
            buf.add(s, a, r * config.reward_scale, s2, done)
            ep_reward += r
            ep_steps += 1
            if step >= config.learning_starts and len(buf) >= config.batch_size \
                    and step % config.train_freq == 0:
                loss, grads = dqn_loss_and_gradient(params, target, buf.sample(config.batch_size, rng),
                                                    config.gamma)
                params = opt.step(params, grads)
                log.losses.append(loss)
            if (step + 1) % config.target_sync == 0:
                target = params.copy()
            if on_step:
                on_step(step, params, target)
            s = s2
            if done:
                ma = log.add(ep_steps, ep_reward)
                if len(log.rows) >= log.window and ma > log.best_moving_average:
                    log.best_moving_average = ma
                    log.best_params = params.copy()
                    log.best_episode = len(log.rows)
                    if checkpoint_path:
                        save_checkpoint(checkpoint_path, log.best_params, meta)
                if progress:
                    progress(step + 1, log)
                ep_reward, ep_steps = 0.0, 0
                s = env.reset()
    except TrainingFault as exc:
        exc.log = log
        _persist()
        raise
    except Exception as exc:
        _persist()
        raise TrainingFault(f"environment failure at step {step}: {exc}", log) from exc
    _persist()
    return (log.best_params or params), log


@dataclass
class DqnPolicy:
    """Greedy policy ``env -> action`` over :meth:`GridEnv.state_vector`."""

    params: MlpParameters

    def __call__(self, env: GridEnv) -> int:
        return greedy_action(self.params, env.state_vector())


# ---------------------------------------------------------------------------
# tabular Q-learning on (δ̄, ω̄)
# ---------------------------------------------------------------------------

@dataclass
class QTable:
    n_actions: int = 2
    delta_range: tuple[float, float] = (-math.pi, math.pi)
    omega_range: tuple[float, float] = (-0.05, 0.05)
    bins: tuple[int, int] = (32, 32)
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros((*self.bins, self.n_actions))

    def cell(self, delta: float, omega: float) -> tuple[int, int]:
        out = []
        for x, (lo, hi), n in zip((delta, omega), (self.delta_range, self.omega_range), self.bins):
            k = int(math.floor((x - lo) / (hi - lo) * n))
            out.append(min(max(k, 0), n - 1))
        return tuple(out)

    def greedy(self, cell) -> int:
        return int(np.argmax(self.values[cell]))


def tabular_q_update(table: QTable, state_cell, action: int, reward: float, next_cell,
                     eta: float, gamma: float, terminal: bool = False) -> QTable:
    q = table.values
    nxt = 0.0 if terminal else float(np.max(q[next_cell]))
    q[state_cell][action] += eta * (reward + gamma * nxt - q[state_cell][action])
    return table


def train_tabular_q(env: GridEnv, sampler: ScenarioSampler, total_steps: int, eta: float = 0.1,
                    gamma: float = 0.99, eps_min: float = 0.02, eps_decay_steps: int | None = None,
                    seed: int = 0) -> tuple[QTable, list[float]]:
    """Q-learning on the pseudo state of :func:`dynsim.group_pseudo_state`."""
    rng = np.random.default_rng(seed)
    table = QTable(n_actions=env.config.n_o)
    decay = eps_decay_steps or max(int(0.1 * total_steps), 1)
    rewards: list[float] = []
    env.reset(sampler.sample(rng))
    cell = table.cell(*dynsim.group_pseudo_state(env.state))
    ep = 0.0
    for step in range(total_steps):
        eps = max(eps_min, 1.0 + (eps_min - 1.0) * step / decay)
        a = int(rng.integers(table.n_actions)) if rng.random() < eps else table.greedy(cell)
        _, r, done, _ = env.step(a)
        nxt = table.cell(*dynsim.group_pseudo_state(env.state))
        tabular_q_update(table, cell, a, r, nxt, eta, gamma, terminal=done)
        ep += r
        cell = nxt
        if done:
            rewards.append(ep)
            ep = 0.0
            env.reset(sampler.sample(rng))
            cell = table.cell(*dynsim.group_pseudo_state(env.state))
    return table, rewards


def save_qtable(path, table: QTable) -> None:
    doc = {"format": "gridrl-qtable", "version": 1, "n_actions": table.n_actions,
           "delta_range": list(table.delta_range), "omega_range": list(table.omega_range),
           "bins": list(table.bins), "values": table.values.tolist()}
    Path(path).write_text(json.dumps(doc))


def load_qtable(path) -> QTable:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "gridrl-qtable" or doc.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 gridrl Q-table")
    t = QTable(int(doc["n_actions"]), tuple(doc["delta_range"]), tuple(doc["omega_range"]),
               tuple(doc["bins"]), np.asarray(doc["values"], dtype=float))
    if t.values.shape != (*t.bins, t.n_actions):
        raise ValueError(f"{path}: Q-table shape does not match its bins")
    return t


@dataclass
class QTablePolicy:
    table: QTable

    def __call__(self, env: GridEnv) -> int:
        return self.table.greedy(self.table.cell(*dynsim.group_pseudo_state(env.state)))
