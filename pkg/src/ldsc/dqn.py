"""Double-DQN over a fixed set of discrete choices with SMDP (multi-step) targets.

Used for both the subgoal-level and the option-level policy. One output head
per candidate; admissibility is enforced by masking at selection and
bootstrap time.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .nn import AdamState, MlpParams, adam_step, backward, forward, init_mlp, save_params, load_params, soft_update
from .smdp import discounted_return


@dataclass(frozen=True)
class SmdpExperience:
    context: np.ndarray
    choice: int
    rewards: tuple[float, ...]
    tau: int
    next_context: np.ndarray
    next_candidates: tuple[int, ...]
    terminal: bool


@dataclass
class LinearSchedule:
    start: float
    end: float
    decay_steps: int

    def value(self, t: int) -> float:
        if self.decay_steps <= 0:
            return self.end
        frac = min(1.0, t / self.decay_steps)
        return self.start + (self.end - self.start) * frac


class NoAdmissibleChoice(ValueError):
    pass


class DiscreteQPolicy:
    def __init__(
        self,
        context_dim: int,
        candidate_count: int,
        hidden: Sequence[int] = (32, 32),
        gamma: float = 0.99,
        lr: float = 1e-3,
        tau: float = 0.01,
        batch_size: int = 64,
        capacity: int = 100_000,
        epsilon: Optional[LinearSchedule] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        if capacity < batch_size:
            raise ValueError("replay capacity must be >= batch_size")
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.context_dim = context_dim
        self.candidate_count = candidate_count
        self.gamma = gamma
        self.lr = lr
        self.tau = tau
        self.batch_size = batch_size
        self.epsilon = epsilon or LinearSchedule(1.0, 0.05, 10_000)
        self.online = init_mlp([context_dim, *hidden, candidate_count], self.rng, "relu", "linear")
        self.target = self.online.copy()
        self.adam = AdamState.zeros_like(self.online)
        self.replay: deque[SmdpExperience] = deque(maxlen=capacity)
        self.decisions = 0
        self.updates = 0
        # when set, epsilon follows this external clock (e.g. episode index)
        self.schedule_clock: Optional[int] = None

    def current_epsilon(self) -> float:
        t = self.decisions if self.schedule_clock is None else self.schedule_clock
        return self.epsilon.value(t)

    def q_values(self, context) -> np.ndarray:
        return forward(self.online, context)[0]

    def select(self, context, candidates: Iterable[int], explore: bool) -> int:
        """Epsilon-greedy over ``candidates``; greedy ties go to the lowest index."""
        cands = sorted(set(int(c) for c in candidates))
        if not cands:
            raise NoAdmissibleChoice("no admissible choice")
        if len(cands) == 1:
            if explore:
                self.decisions += 1
            return cands[0]
        if explore:
            eps = self.current_epsilon()
            self.decisions += 1
            if self.rng.random() < eps:
                return cands[int(self.rng.integers(len(cands)))]
        q = self.q_values(context)
        return max(cands, key=lambda c: (q[c], -c))

    def push(self, exp: SmdpExperience) -> None:
        if not 0 <= exp.choice < self.candidate_count:
            raise ValueError(f"choice {exp.choice} outside [0, {self.candidate_count})")
        if any(not 0 <= c < self.candidate_count for c in exp.next_candidates):
            raise ValueError("next_candidates outside the candidate range")
        if exp.tau != len(exp.rewards) or exp.tau < 1:
            raise ValueError("tau must equal len(rewards) >= 1")
        if len(exp.context) != self.context_dim or len(exp.next_context) != self.context_dim:
            raise ValueError("context dimension mismatch")
        self.replay.append(exp)

    def sample(self, n: Optional[int] = None) -> list[SmdpExperience]:
        n = self.batch_size if n is None else n
        idx = self.rng.integers(len(self.replay), size=n)
        return [self.replay[i] for i in idx]

    def smdp_target(self, batch: Sequence[SmdpExperience]) -> np.ndarray:
        """Discounted option return plus gamma**tau times the double-DQN bootstrap."""
        if not batch:
            raise ValueError("empty batch")
        next_ctx = np.stack([e.next_context for e in batch])
        q_online = forward(self.online, next_ctx)[0]
        q_target = forward(self.target, next_ctx)[0]
        y = np.empty(len(batch))
        for k, e in enumerate(batch):
            y[k] = discounted_return(e.rewards, self.gamma)
            if e.terminal:
                continue
            if not e.next_candidates:
                raise NoAdmissibleChoice("non-terminal experience with no next candidates")
            best = max(e.next_candidates, key=lambda c: (q_online[k, c], -c))
            y[k] += self.gamma**e.tau * q_target[k, best]
        return y

    def train_step(self, batch: Optional[Sequence[SmdpExperience]] = None) -> float:
        if batch is None:
            if len(self.replay) < self.batch_size:
                raise ValueError("not enough experience to train")
            batch = self.sample()
        y = self.smdp_target(batch)
        ctx = np.stack([e.context for e in batch])
        choices = np.array([e.choice for e in batch])
        q, cache = forward(self.online, ctx)
        rows = np.arange(len(batch))
        err = q[rows, choices] - y
        loss = float(np.mean(err**2))
        g = np.zeros_like(q)
        g[rows, choices] = 2.0 * err / len(batch)
        adam_step(self.online, backward(self.online, cache, g), self.adam, self.lr)
        soft_update(self.target, self.online, self.tau)
        self.updates += 1
        return loss

    def maybe_train(self) -> Optional[float]:
        if len(self.replay) >= self.batch_size:
            return self.train_step()
        return None

    def save(self, directory, names: Optional[Sequence[str]] = None, conditioning: Optional[dict] = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_params(directory / "q_networks.json", online=self.online, target=self.target)
        sidecar = {
            "candidate_names": list(names) if names is not None else list(range(self.candidate_count)),
            "conditioning": conditioning or {},
            "context_dim": self.context_dim,
            "epsilon": {
                "start": self.epsilon.start,
                "end": self.epsilon.end,
                "decay_steps": self.epsilon.decay_steps,
                "decisions": self.decisions,
                "current": self.current_epsilon(),
            },
            "replay_size": len(self.replay),
            "updates": self.updates,
        }
        (directory / "policy.json").write_text(json.dumps(sidecar, indent=2))

    def load_weights(self, directory) -> None:
        nets = load_params(Path(directory) / "q_networks.json")
        self.online, self.target = nets["online"], nets["target"]
        self.adam = AdamState.zeros_like(self.online)
        sidecar = json.loads((Path(directory) / "policy.json").read_text())
        self.decisions = sidecar["epsilon"]["decisions"]
