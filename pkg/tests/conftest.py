import itertools

import numpy as np
import pytest

from bess_lab.model import Action, BatteryParams, BatteryState, ExogenousSample, step


def brute_force(lmp, solar=None, params=BatteryParams(), initial=BatteryState()):
    """Best total reward and action sequence over all 3^T sequences, by direct enumeration.

    Ties keep the first sequence met in Buy < Null < Sell lexicographic order.
    """
    solar = np.zeros(len(lmp)) if solar is None else solar
    samples = [ExogenousSample(float(p), float(s)) for p, s in zip(lmp, solar)]
    order = (Action.BUY, Action.NULL, Action.SELL)
    best, best_seq = -np.inf, None
    for seq in itertools.product(order, repeat=len(samples)):
        state, total = initial, 0.0
        for a, x in zip(seq, samples):
            out = step(state, a, x, params)
            total += out.reward
            state = out.next_state
        if total > best + 1e-12:
            best, best_seq = total, seq
    return best, list(best_seq)


@pytest.fixture
def params():
    return BatteryParams()


def numeric_gradient(f, theta, h=1e-5):
    """Central finite differences of scalar ``f`` at flat parameter vector ``theta``."""
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def random_toy_problem(seed):
    """Small random network, target network and batch on normalised inputs."""
    from bess_lab.dqn import Batch, QNetwork

    rng = np.random.default_rng(seed)
    n_in = int(rng.integers(2, 6))
    hidden = [int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3)))]
    sizes = [n_in, *hidden, 3]
    net = QNetwork(sizes, rng=rng)
    target = QNetwork(sizes, rng=rng)
    n = int(rng.integers(1, 8))
    batch = Batch(rng.normal(size=(n, n_in)), rng.integers(0, 3, n), rng.normal(size=n),
                  rng.normal(size=(n, n_in)), (rng.random(n) < 0.3).astype(float))
    gamma = float(rng.uniform(0.0, 1.0))
    return net, target, batch, gamma


def gradient_check_error(seed):
    """Relative discrepancy between analytic and finite-difference Bellman-loss gradients."""
    from bess_lab.dqn import bellman_loss

    net, target, batch, gamma = random_toy_problem(seed)
    _, grads = bellman_loss(net, target, batch, gamma)
    analytic = np.concatenate([g.ravel() for g in grads])
    theta = net.flat()

    def loss_at(t):
        probe = net.copy()
        probe.set_flat(t)
        return bellman_loss(probe, target, batch, gamma)[0]

    numeric = numeric_gradient(loss_at, theta)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
