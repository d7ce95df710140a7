"""Deep Q-network agent over the 35-feature battery observation.

A small ReLU MLP maps (SoC, 17 LMP lags, 17 solar lags) to one value per
action.  Training is epsilon-greedy exploration with uniform experience
replay and gradient steps on the squared Bellman residual against a
periodically synced target network.  Everything is numpy on one thread and
driven by a single seeded generator, so runs are bit-reproducible.
"""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bess_lab.data import SeriesSet
from bess_lab.model import (
    OBS_DIM,
    TIE_ORDER,
    Action,
    BatteryParams,
    BatteryState,
    ExogenousSample,
    Observation,
    step,
    window_matrix,
)

log = logging.getLogger(__name__)

N_ACTIONS = 3


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------- network


class QNetwork:
    """Fully connected ReLU network; weights are stored as ``(n_in, n_out)`` matrices."""

    def __init__(self, layer_sizes, weights=None, biases=None, rng: np.random.Generator | None = None):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if self.layer_sizes[-1] != N_ACTIONS:
            raise ValueError(f"output layer must have {N_ACTIONS} units")
        pairs = list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if weights is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            # uniform fan-in init, as in common deep-learning defaults
            weights, biases = [], []
            for n_in, n_out in pairs:
                bound = 1.0 / np.sqrt(n_in)
                weights.append(rng.uniform(-bound, bound, (n_in, n_out)))
                biases.append(rng.uniform(-bound, bound, n_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for (n_in, n_out), w, b in zip(pairs, self.weights, self.biases):
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ValueError("weight/bias shapes do not match layer_sizes")

    @classmethod
    def zeros(cls, layer_sizes) -> "QNetwork":
        pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
        return cls(layer_sizes, [np.zeros(p) for p in pairs], [np.zeros(p[1]) for p in pairs])

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "QNetwork":
        return QNetwork(self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, theta: np.ndarray) -> None:
        k = 0
        for p in self.parameters():
            p[...] = theta[k:k + p.size].reshape(p.shape)
            k += p.size

    def is_finite(self) -> bool:
        return bool(np.isfinite(sum(float(np.sum(p)) for p in self.parameters())))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], d_out: np.ndarray) -> list[np.ndarray]:
        """Gradients (w0, b0, w1, b1, ...) given d loss / d output for a batch."""
        grads = [None] * (2 * len(self.weights))
        delta = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        return grads


def forward(net: QNetwork, obs) -> np.ndarray:
    """Action values for one observation (or a ``(batch, 35)`` array)."""
    x = obs.as_vector() if isinstance(obs, Observation) else np.asarray(obs, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"observation has dimension {x.shape[-1]}, network expects {net.input_dim}")
    return net(x)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def bellman_loss(net: QNetwork, target_net: QNetwork, batch: Batch,
                 gamma: float) -> tuple[float, list[np.ndarray]]:
    """Mean squared Bellman residual and its gradient with respect to ``net`` only."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    q_next = target_net(batch.next_obs).max(axis=1)
    target = batch.rewards + gamma * q_next * (1.0 - batch.dones)
    q, acts = net.forward_cached(batch.obs)
    rows = np.arange(n)
    resid = q[rows, batch.actions] - target
    loss = float(np.mean(resid ** 2))
    d_out = np.zeros_like(q)
    d_out[rows, batch.actions] = 2.0 * resid / n
    return loss, net.backward(acts, d_out)


def greedy_action(q: np.ndarray) -> Action:
    best = TIE_ORDER[0]
    for a in TIE_ORDER[1:]:
        if q[a] > q[best]:
            best = a
    return best


def act_epsilon_greedy(net: QNetwork, obs, epsilon: float, rng: np.random.Generator) -> Action:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return Action(int(rng.integers(N_ACTIONS)))
    return greedy_action(forward(net, obs))


# --------------------------------------------------------------------------- replay


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.intp)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, reward, next_obs, done) -> None:
        i = self._pos
        self.obs[i] = obs
        self.actions[i] = int(action)
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])


# --------------------------------------------------------------------------- optimisers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------- config & normalisation


@dataclass(frozen=True)
class DqnConfig:
    total_steps: int = 200_000
    exploration_fraction: float = 0.9685
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    learning_rate: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int = 32
    buffer_capacity: int = 100_000
    learning_starts: int = 1_000
    train_freq: int = 1
    gradient_steps_per_env_step: int = 1
    target_update_interval: int = 1_000
    gamma: float = 0.99
    hidden: tuple[int, ...] = (64, 64)
    reward_scale: float = 1e-3
    max_grad_norm: float | None = 10.0
    obs_normalization: bool = True
    eval_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.exploration_fraction <= 1.0:
            raise ValueError("exploration_fraction must lie in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")
        if self.total_steps < 0 or self.batch_size < 1 or self.target_update_interval < 1:
            raise ValueError("invalid step counts")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_sizes(self) -> list[int]:
        return [OBS_DIM, *self.hidden, N_ACTIONS]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DqnConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def epsilon_at(k: int, config: DqnConfig) -> float:
    """Linear anneal reaching ``epsilon_end`` at ``exploration_fraction * total_steps``."""
    span = config.exploration_fraction * config.total_steps
    if span <= 0:
        return config.epsilon_end
    frac = min(1.0, k / span)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


@dataclass
class Normalizer:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(OBS_DIM))
    scale: np.ndarray = field(default_factory=lambda: np.ones(OBS_DIM))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    @classmethod
    def fit(cls, series: SeriesSet, params: BatteryParams) -> "Normalizer":
        """Per-feature constants from the training split: SoC by capacity, windows by series stats."""
        def stats(v):
            s = float(np.std(v))
            return float(np.mean(v)), (s if s > 1e-12 else 1.0)
        lm, ls = stats(series.lmp)
        sm, ss = stats(series.solar)
        k = (OBS_DIM - 1) // 2
        mean = np.concatenate(([params.e_max / 2], np.full(k, lm), np.full(k, sm)))
        scale = np.concatenate(([params.e_max / 2], np.full(k, ls), np.full(k, ss)))
        return cls(mean, scale)


# --------------------------------------------------------------------------- policy & persistence


class DqnPolicy:
    """Greedy policy around a trained network."""

    def __init__(self, net: QNetwork, normalizer: Normalizer | None = None, config: DqnConfig | None = None):
        self.net = net
        self.normalizer = normalizer or Normalizer()
        self.config = config

    def q_values(self, observation: Observation) -> np.ndarray:
        return self.net(self.normalizer(observation.as_vector()))

    def decide(self, observation: Observation) -> Action:
        return greedy_action(self.q_values(observation))

    def reset(self) -> None:
        pass

    def save(self, path) -> tuple[Path, Path]:
        path = Path(path)
        save_weights(self.net, path)
        sidecar = path.with_suffix(".json")
        meta = {
            "layer_sizes": self.net.layer_sizes,
            "config": None if self.config is None else self.config.to_dict(),
            "normalization": {"mean": self.normalizer.mean.tolist(), "scale": self.normalizer.scale.tolist()},
        }
        sidecar.write_text(json.dumps(meta, indent=2) + "\n")
        return path, sidecar

    @classmethod
    def load(cls, path) -> "DqnPolicy":
        path = Path(path)
        net = load_weights(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        norm = meta["normalization"]
        cfg = None if meta.get("config") is None else DqnConfig.from_dict(meta["config"])
        return cls(net, Normalizer(np.array(norm["mean"]), np.array(norm["scale"])), cfg)


def save_weights(net: QNetwork, path) -> None:
    """Header: layer count then layer sizes as little-endian uint32; then per layer
    the ``(n_in, n_out)`` weight matrix and the bias, row-major float64."""
    with open(path, "wb") as fh:
        sizes = net.layer_sizes
        fh.write(struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes))
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(path) -> QNetwork:
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data, 0)
    sizes = list(struct.unpack_from(f"<{n}I", data, 4))
    off = 4 + 4 * n
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=off).reshape(n_in, n_out)
        off += 8 * n_in * n_out
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=off)
        off += 8 * n_out
        weights.append(w.astype(float))
        biases.append(b.astype(float))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return QNetwork(sizes, weights, biases)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    policy: DqnPolicy
    losses: list[float]
    episode_returns: list[float]
    seconds: float


def _clip_grads(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def greedy_return(net: QNetwork, exo: np.ndarray, soc_mean: float, soc_scale: float,
                  series: SeriesSet, params: BatteryParams, initial: BatteryState) -> float:
    """Profit of the greedy policy over one pass of ``series`` (features pre-normalised)."""
    state, total = initial, 0.0
    lmp, solar = series.lmp.tolist(), series.solar.tolist()
    for t in range(len(lmp)):
        x = np.concatenate(([(state.total() - soc_mean) / soc_scale], exo[t]))
        out = step(state, greedy_action(net(x)), ExogenousSample(lmp[t], solar[t]), params)
        total += out.reward
        state = out.next_state
    return total


def train_agent(train_series: SeriesSet, params: BatteryParams, config: DqnConfig = DqnConfig(),
                initial: BatteryState = BatteryState()) -> TrainResult:
    n = len(train_series)
    if n == 0:
        raise ValueError("empty training series")
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    net = QNetwork(config.layer_sizes, rng=rng)
    target = net.copy()
    opt = Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)
    norm = Normalizer.fit(train_series, params) if config.obs_normalization else Normalizer()
    buffer = ReplayBuffer(max(1, min(config.buffer_capacity, config.total_steps)))

    exo = np.hstack((window_matrix(train_series.lmp), window_matrix(train_series.solar)))
    exo = (exo - norm.mean[1:]) / norm.scale[1:]
    soc_mean, soc_scale = norm.mean[0], norm.scale[0]
    lmp = train_series.lmp.tolist()
    solar = train_series.solar.tolist()

    def features(soc: float, t: int) -> np.ndarray:
        return np.concatenate(([(soc - soc_mean) / soc_scale], exo[t]))

    state, t = initial, 0
    obs = features(state.total(), 0)
    losses, returns, ep_return = [], [], 0.0
    best = None
    for k in range(config.total_steps):
        eps = epsilon_at(k, config)
        if rng.random() < eps:
            a = Action(int(rng.integers(N_ACTIONS)))
        else:
            a = greedy_action(net(obs))
        out = step(state, a, ExogenousSample(lmp[t], solar[t]), params)
        ep_return += out.reward
        done = t + 1 == n
        next_obs = obs if done else features(out.next_state.total(), t + 1)
        buffer.add(obs, a, out.reward * config.reward_scale, next_obs, done)
        if done:
            returns.append(ep_return)
            ep_return = 0.0
            state, t = initial, 0
            obs = features(state.total(), 0)
        else:
            state, t, obs = out.next_state, t + 1, next_obs

        if k + 1 >= config.learning_starts and (k + 1) % config.train_freq == 0:
            for _ in range(config.gradient_steps_per_env_step):
                batch = buffer.sample(config.batch_size, rng)
                loss, grads = bellman_loss(net, target, batch, config.gamma)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at step {k}")
                opt.update(net.parameters(), _clip_grads(grads, config.max_grad_norm))
                losses.append(loss)
        if (k + 1) % config.target_update_interval == 0:
            if not net.is_finite():
                raise DivergenceError(f"non-finite weights at step {k}")
            target = net.copy()
        if config.eval_interval and (k + 1) % config.eval_interval == 0:
            score = greedy_return(net, exo, soc_mean, soc_scale, train_series, params, initial)
            if best is None or score > best[0]:
                best = (score, net.copy())
    if not net.is_finite():
        raise DivergenceError("non-finite weights after training")
    if config.eval_interval:
        score = greedy_return(net, exo, soc_mean, soc_scale, train_series, params, initial)
        if best is not None and best[0] > score:
            net = best[1]
    secs = time.perf_counter() - t0
    log.info("dqn seed %d: %d steps in %.1fs", config.seed, config.total_steps, secs)
    return TrainResult(DqnPolicy(net, norm, config), losses, returns, secs)


def train(train_series: SeriesSet, params: BatteryParams, config: DqnConfig = DqnConfig(),
          initial: BatteryState = BatteryState()) -> DqnPolicy:
    return train_agent(train_series, params, config, initial).policy
