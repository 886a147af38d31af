"""Deep Q-learning pieces shared by every learning method: Q-network, replay ring,
epsilon-greedy selection and the temporal-difference loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, ParamVector


class QNetwork(MLP):
    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 128, layers: int = 3,
                 rng: np.random.Generator | None = None, name: str = "q"):
        sizes = [obs_dim] + [hidden] * (layers - 1) + [n_actions]
        super().__init__(sizes, rng, name)

    @property
    def param_vector(self) -> ParamVector:
        return ParamVector.of(self)


def q_values(net: QNetwork, obs: np.ndarray) -> np.ndarray:
    single = obs.ndim == 1
    out = net(obs[None, :] if single else obs)
    return out[0] if single else out


def select_action(qs: np.ndarray, epsilon: float, rng: np.random.Generator,
                  allowed: np.ndarray | None = None) -> int:
    """Uniform action with probability ``epsilon``, otherwise the first argmax."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    qs = np.asarray(qs, dtype=float)
    if allowed is not None and allowed.any():
        choices = np.flatnonzero(allowed)
        if rng.random() < epsilon:
            return int(rng.choice(choices))
        masked = np.where(allowed, qs, -np.inf)
        return int(np.argmax(masked))
    if rng.random() < epsilon:
        return int(rng.integers(len(qs)))
    return int(np.argmax(qs))


def linear_epsilon(episode: int, episodes: int, start: float = 1.0, end: float = 0.05,
                   decay_frac: float = 0.5) -> float:
    span = max(1, int(episodes * decay_frac))
    if episode >= span:
        return end
    return start + (end - start) * episode / span


@dataclass
class Transition:
    node: int
    soc: float
    action: int
    reward: float
    next_node: int
    next_soc: float
    terminal: bool
    fcc_true: np.ndarray
    next_fcc_true: np.ndarray
    window: np.ndarray  # (W, 3) rows of (node, soc, time); left-padded
    window_mask: np.ndarray  # (W,) bool
    next_window: np.ndarray
    next_window_mask: np.ndarray
    ev: int = -1


class ReplayBuffer:
    """Fixed-capacity ring; a batch is drawn uniformly without replacement."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._data)

    def push(self, tr: Transition):
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if batch_size > len(self._data):
            raise ValueError(f"cannot draw {batch_size} from {len(self._data)} transitions")
        idx = rng.choice(len(self._data), size=batch_size, replace=False)
        return [self._data[i] for i in idx]

    def __iter__(self):
        return iter(self._data)


def td_targets(rewards: np.ndarray, next_q: np.ndarray, terminals: np.ndarray, gamma: float) -> np.ndarray:
    """``r + gamma * max_a Q_target(o', a)``, without bootstrapping on terminal steps."""
    return rewards + gamma * next_q.max(axis=1) * (1.0 - terminals.astype(float))


def td_loss(net: QNetwork, obs: np.ndarray, actions: np.ndarray, targets: np.ndarray,
            backward: bool = True) -> tuple[float, np.ndarray]:
    """Mean squared TD error of ``Q(o, a)`` against fixed ``targets``.

    Gradients accumulate into ``net``; the returned array is the loss gradient
    with respect to ``obs``.
    """
    if len(actions) == 0:
        raise ValueError("empty batch")
    q, caches = net.forward(obs)
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    loss = float(np.mean(err ** 2))
    if not backward:
        return loss, np.zeros_like(obs)
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / len(actions)
    return loss, net.backward(caches, dq)


class TargetSync:
    """Copies online parameters into the target net every ``period`` optimiser steps."""

    def __init__(self, online: ParamVector, target: ParamVector, period: int = 100):
        self.online, self.target, self.period = online, target, period
        self.steps = 0
        self.synced_at: list[int] = []
        target.copy_from(online)

    def tick(self) -> bool:
        self.steps += 1
        if self.steps % self.period == 0:
            self.target.copy_from(self.online)
            self.synced_at.append(self.steps)
            return True
        return False
