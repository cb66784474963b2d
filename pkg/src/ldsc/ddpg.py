"""DDPG actor-critic used inside every option and as the flat baseline."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dqn import LinearSchedule
from .nn import AdamState, adam_step, backward, forward, init_mlp, load_params, save_params, soft_update
from .smdp import OptionDef, StateVec


class TransitionBuffer:
    """FIFO of (s, a, r, s', done) rows stored in growable numpy arrays."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int):
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._alloc = 0
        self.size = 0
        self.head = 0
        self._grow(min(capacity, 1024))

    def _grow(self, n: int) -> None:
        def resize(arr, width):
            new = np.zeros((n, width))
            if arr is not None:
                new[: arr.shape[0]] = arr
            return new

        self.s = resize(getattr(self, "s", None), self.state_dim)
        self.a = resize(getattr(self, "a", None), self.action_dim)
        self.r = resize(getattr(self, "r", None), 1)
        self.s2 = resize(getattr(self, "s2", None), self.state_dim)
        self.d = resize(getattr(self, "d", None), 1)
        self._alloc = n

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done) -> None:
        if self.size < self.capacity:
            if self.size == self._alloc:
                self._grow(min(self.capacity, self._alloc * 2))
            i = self.size
            self.size += 1
        else:
            # full: overwrite the oldest row
            i = self.head
            self.head = (self.head + 1) % self.capacity
        self.s[i], self.a[i], self.r[i, 0], self.s2[i], self.d[i, 0] = s, a, r, s2, float(done)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=n)
        return self.s[idx], self.a[idx], self.r[idx, 0], self.s2[idx], self.d[idx, 0]


class DdpgAgent:
    def __init__(
        self,
        state_dim: int,
        action_dim: int = 2,
        action_bound: float = 1.0,
        hidden: Sequence[int] = (400, 300),
        gamma: float = 0.99,
        actor_lr: float = 1e-4,
        critic_lr: float = 1e-3,
        tau: float = 0.01,
        batch_size: int = 64,
        capacity: int = 100_000,
        noise: Optional[LinearSchedule] = None,
        rng: Optional[np.random.Generator] = None,
        preact_l2: float = 1e-2,
        q_bounds: Optional[tuple[float, float]] = None,
    ):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.action_bound = action_bound
        self.gamma = gamma
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.tau = tau
        # hinge penalty on |pre-tanh| beyond this, where the policy gradient vanishes
        self.preact_l2 = preact_l2
        self.preact_limit = 2.0
        # achievable return range; critic targets are clipped into it
        self.q_bounds = q_bounds
        self.batch_size = batch_size
        self.noise = noise or LinearSchedule(0.3, 0.05, 50_000)
        self.actor = init_mlp([state_dim, *hidden, action_dim], self.rng, "relu", "tanh", action_bound, final_scale=3e-3)
        self.critic = init_mlp([state_dim + action_dim, *hidden, 1], self.rng, "relu", "linear", final_scale=3e-3)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_adam = AdamState.zeros_like(self.actor)
        self.critic_adam = AdamState.zeros_like(self.critic)
        self.replay = TransitionBuffer(state_dim, action_dim, capacity)
        self.explore_steps = 0
        self.updates = 0
        self.schedule_clock: Optional[int] = None

    def noise_sigma(self) -> float:
        t = self.explore_steps if self.schedule_clock is None else self.schedule_clock
        return self.noise.value(t)

    def act(self, state_ctx, explore: bool) -> np.ndarray:
        mu, _ = forward(self.actor, state_ctx)
        if not np.all(np.isfinite(mu)):
            raise FloatingPointError("actor produced a non-finite action")
        if explore:
            mu = mu + self.rng.normal(0.0, self.noise_sigma(), size=mu.shape)
            self.explore_steps += 1
        return np.clip(mu, -self.action_bound, self.action_bound)

    def push(self, s, a, r, s2, done) -> None:
        self.replay.push(s, a, r, s2, done)

    def train_step(self, batch=None) -> tuple[float, float]:
        """One critic regression step and one deterministic policy-gradient step."""
        if batch is None:
            if len(self.replay) < self.batch_size:
                raise ValueError("not enough transitions to train")
            batch = self.replay.sample(self.batch_size, self.rng)
        s, a, r, s2, d = (np.asarray(b, dtype=float) for b in batch)
        n = len(r)

        a2, _ = forward(self.actor_target, s2)
        q2, _ = forward(self.critic_target, np.hstack([s2, a2]))
        y = r + self.gamma * (1.0 - d) * q2[:, 0]
        if self.q_bounds is not None:
            y = np.clip(y, *self.q_bounds)

        q, cache = forward(self.critic, np.hstack([s, a]))
        err = q[:, 0] - y
        critic_loss = float(np.mean(err**2))
        grads = backward(self.critic, cache, (2.0 * err / n)[:, None])
        adam_step(self.critic, grads, self.critic_adam, self.critic_lr)

        mu, actor_cache = forward(self.actor, s)
        qa, qcache = forward(self.critic, np.hstack([s, mu]))
        actor_objective = float(np.mean(qa))
        dq = backward(self.critic, qcache, np.full((n, 1), -1.0 / n))
        dmu = dq.input[:, self.state_dim:]
        z = actor_cache["pre"][-1]
        excess = np.sign(z) * np.maximum(np.abs(z) - self.preact_limit, 0.0)
        actor_grads = backward(self.actor, actor_cache, dmu, 2.0 * self.preact_l2 * excess / n)
        adam_step(self.actor, actor_grads, self.actor_adam, self.actor_lr)

        soft_update(self.actor_target, self.actor, self.tau)
        soft_update(self.critic_target, self.critic, self.tau)
        self.updates += 1
        return critic_loss, actor_objective

    def maybe_train(self):
        if len(self.replay) >= self.batch_size:
            return self.train_step()
        return None

    def clone(self, rng: Optional[np.random.Generator] = None) -> "DdpgAgent":
        twin = copy.copy(self)
        for name in ("actor", "critic", "actor_target", "critic_target", "actor_adam", "critic_adam", "replay"):
            setattr(twin, name, copy.deepcopy(getattr(self, name)))
        twin.noise = copy.copy(self.noise)
        if rng is not None:
            twin.rng = rng
        return twin

    def save(self, path) -> None:
        save_params(path, actor=self.actor, critic=self.critic, actor_target=self.actor_target, critic_target=self.critic_target)

    def load(self, path) -> None:
        nets = load_params(path)
        self.actor, self.critic = nets["actor"], nets["critic"]
        self.actor_target, self.critic_target = nets["actor_target"], nets["critic_target"]
        self.actor_adam = AdamState.zeros_like(self.actor)
        self.critic_adam = AdamState.zeros_like(self.critic)


def intra_option_reward(prev: StateVec, nxt: StateVec, option: OptionDef, step_penalty: float = 0.01) -> tuple[float, bool]:
    """Pseudo-reward seen only by the option's own learner."""
    if option.terminates(nxt):
        return 1.0, True
    return -step_penalty, False
