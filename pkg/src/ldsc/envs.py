"""Deterministic point-robot mazes with landmark flags.

The robot is a unicycle on a plane: heading ``theta`` plus forward speed
``v`` and turn rate ``omega``. Walls are axis-aligned segments; collisions
are resolved per axis so the robot slides along walls rather than bouncing.
Landmarks are discs that latch a flag once entered with their prerequisite
flags already set.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .smdp import StateVec, SubgoalSpec, wrap_angle

SCHEMA_VERSION = 1
BUILTIN_NAMES = ("four_rooms", "point_maze", "e_maze", "tunnel")
MINI_NAMES = tuple(f"mini_{n}" for n in BUILTIN_NAMES)


class LayoutError(ValueError):
    pass


Segment = tuple[tuple[float, float], tuple[float, float]]


@dataclass
class MazeLayout:
    walls: list[Segment]
    landmarks: list[SubgoalSpec]
    starts: list[tuple[float, float, float]]
    bounds: tuple[float, float, float, float]
    goal_landmark: str
    step_penalty: float = 0.01
    goal_reward: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        self.walls = [((float(a[0]), float(a[1])), (float(b[0]), float(b[1]))) for a, b in self.walls]
        self.starts = [tuple(float(c) for c in s) for s in self.starts]
        self.bounds = tuple(float(b) for b in self.bounds)
        self.validate()
        index = tuple((lm.name, i) for i, lm in enumerate(self.landmarks))
        self.landmarks = [
            SubgoalSpec(lm.name, tuple(lm.region_center), lm.region_radius, tuple(lm.required_flags), index)
            for lm in self.landmarks
        ]

    def validate(self) -> None:
        x0, y0, x1, y1 = self.bounds
        if not (x0 < x1 and y0 < y1):
            raise LayoutError("bounds: need x_min < x_max and y_min < y_max")
        for (ax, ay), (bx, by) in self.walls:
            if ax != bx and ay != by:
                raise LayoutError(f"walls: segment {((ax, ay), (bx, by))} is not axis-aligned")
        if not self.starts:
            raise LayoutError("starts: at least one start pose required")
        for sx, sy, _ in self.starts:
            if not (x0 <= sx <= x1 and y0 <= sy <= y1):
                raise LayoutError(f"starts: pose ({sx}, {sy}) outside bounds")
        names = [lm.name for lm in self.landmarks]
        if len(set(names)) != len(names):
            raise LayoutError("landmarks: names must be unique")
        for lm in self.landmarks:
            cx, cy = lm.region_center
            if not (x0 <= cx <= x1 and y0 <= cy <= y1):
                raise LayoutError(f"landmarks: {lm.name!r} lies outside bounds")
            for req in lm.required_flags:
                if req not in names:
                    raise LayoutError(f"landmarks: {lm.name!r} requires unknown landmark {req!r}")
        if self.goal_landmark not in names:
            raise LayoutError(f"goal_landmark: {self.goal_landmark!r} is not a landmark")
        if self.step_penalty < 0:
            raise LayoutError("step_penalty: must be >= 0")

    def landmark(self, name: str) -> SubgoalSpec:
        for lm in self.landmarks:
            if lm.name == name:
                return lm
        raise KeyError(name)

    @property
    def landmark_names(self) -> list[str]:
        return [lm.name for lm in self.landmarks]

    @property
    def scale(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return max(x1 - x0, y1 - y0)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "bounds": list(self.bounds),
            "walls": [[list(a), list(b)] for a, b in self.walls],
            "landmarks": [
                {
                    "name": lm.name,
                    "center": list(lm.region_center),
                    "radius": lm.region_radius,
                    "required_flags": list(lm.required_flags),
                }
                for lm in self.landmarks
            ],
            "starts": [list(s) for s in self.starts],
            "goal_landmark": self.goal_landmark,
            "step_penalty": self.step_penalty,
            "goal_reward": self.goal_reward,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MazeLayout":
        if not isinstance(data, dict):
            raise LayoutError("layout: top-level JSON object expected")
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise LayoutError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
        for key in ("bounds", "walls", "landmarks", "starts", "goal_landmark"):
            if key not in data:
                raise LayoutError(f"{key}: missing")
        try:
            bounds = tuple(float(v) for v in data["bounds"])
        except (TypeError, ValueError) as exc:
            raise LayoutError(f"bounds: {exc}") from None
        if len(bounds) != 4:
            raise LayoutError("bounds: expected 4 numbers")
        try:
            walls = [((float(a[0]), float(a[1])), (float(b[0]), float(b[1]))) for a, b in data["walls"]]
        except (TypeError, ValueError, IndexError) as exc:
            raise LayoutError(f"walls: {exc}") from None
        landmarks = []
        for i, entry in enumerate(data["landmarks"]):
            try:
                landmarks.append(
                    SubgoalSpec(
                        name=str(entry["name"]),
                        region_center=(float(entry["center"][0]), float(entry["center"][1])),
                        region_radius=float(entry["radius"]),
                        required_flags=tuple(str(f) for f in entry.get("required_flags", [])),
                    )
                )
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise LayoutError(f"landmarks[{i}]: {exc}") from None
        try:
            starts = [(float(s[0]), float(s[1]), float(s[2]) if len(s) > 2 else 0.0) for s in data["starts"]]
        except (TypeError, ValueError, IndexError) as exc:
            raise LayoutError(f"starts: {exc}") from None
        return cls(
            walls=walls,
            landmarks=landmarks,
            starts=starts,
            bounds=bounds,
            goal_landmark=str(data["goal_landmark"]),
            step_penalty=float(data.get("step_penalty", 0.01)),
            goal_reward=float(data.get("goal_reward", 1.0)),
            name=str(data.get("name", "custom")),
        )


class DynamicsMode(str, enum.Enum):
    KINEMATIC = "KINEMATIC"
    INERTIAL = "INERTIAL"


@dataclass
class EnvConfig:
    dt: float = 1.0
    max_episode_steps: int = 1000
    dynamics_mode: DynamicsMode = DynamicsMode.KINEMATIC
    action_bound: float = 1.0
    damping: float = 0.5  # INERTIAL only

    def __post_init__(self):
        self.dynamics_mode = DynamicsMode(self.dynamics_mode)
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")


def save_layout(layout: MazeLayout, path) -> None:
    Path(path).write_text(json.dumps(layout.to_dict(), indent=2) + "\n")


def load_layout(path) -> MazeLayout:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LayoutError(f"layout file {path}: {exc}") from None
    return MazeLayout.from_dict(data)


def builtin_layout(name: str) -> MazeLayout:
    if name not in BUILTIN_NAMES + MINI_NAMES:
        raise LayoutError(f"unknown layout {name!r}; choose from {BUILTIN_NAMES + MINI_NAMES}")
    text = resources.files("ldsc.layouts").joinpath(f"{name}.json").read_text()
    return MazeLayout.from_dict(json.loads(text))


def reset(layout: MazeLayout, config: EnvConfig, seed: int) -> StateVec:
    rng = np.random.default_rng(seed)
    x, y, theta = layout.starts[int(rng.integers(len(layout.starts)))]
    return StateVec(x, y, wrap_angle(theta), 0.0, 0.0, (0,) * len(layout.landmarks))


def _blocked(p0: tuple[float, float], p1: tuple[float, float], walls: Sequence[Segment]) -> bool:
    """Does the axis-aligned move p0 -> p1 touch any wall segment?"""
    (x0, y0), (x1, y1) = p0, p1
    mx_lo, mx_hi = min(x0, x1), max(x0, x1)
    my_lo, my_hi = min(y0, y1), max(y0, y1)
    for (ax, ay), (bx, by) in walls:
        wx_lo, wx_hi = min(ax, bx), max(ax, bx)
        wy_lo, wy_hi = min(ay, by), max(ay, by)
        if mx_lo <= wx_hi and wx_lo <= mx_hi and my_lo <= wy_hi and wy_lo <= my_hi:
            return True
    return False


def step(
    state: StateVec,
    action,
    layout: MazeLayout,
    config: EnvConfig,
    t: int = 0,
) -> tuple[StateVec, float, bool]:
    """Advance one control step. ``t`` is the number of steps already taken."""
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError("invalid action")
    a = np.clip(a, -config.action_bound, config.action_bound)
    dt = config.dt
    if config.dynamics_mode is DynamicsMode.KINEMATIC:
        v, omega = float(a[0]), float(a[1])
    else:
        v = state.v + (float(a[0]) - config.damping * state.v) * dt
        omega = state.omega + (float(a[1]) - config.damping * state.omega) * dt
    theta = wrap_angle(state.theta + omega * dt)
    dx = v * math.cos(theta) * dt
    dy = v * math.sin(theta) * dt

    x0, y0, x1, y1 = layout.bounds
    x, y = state.x, state.y
    nx = min(max(x + dx, x0), x1)
    if not _blocked((x, y), (nx, y), layout.walls):
        x = nx
    ny = min(max(y + dy, y0), y1)
    if not _blocked((x, y), (x, ny), layout.walls):
        y = ny

    moved = StateVec(x, y, theta, v, omega, state.flags)
    flags = list(state.flags)
    for i, lm in enumerate(layout.landmarks):
        if not flags[i] and lm.attained(moved):
            flags[i] = 1
    nxt = StateVec(x, y, theta, v, omega, tuple(flags))

    goal_idx = layout.landmark_names.index(layout.goal_landmark)
    if flags[goal_idx] and not state.flags[goal_idx]:
        return nxt, layout.goal_reward, True
    return nxt, -layout.step_penalty, t + 1 >= config.max_episode_steps


@dataclass
class MazeEnv:
    """Stateful wrapper around ``reset``/``step`` that counts episode steps."""

    layout: MazeLayout
    config: EnvConfig = field(default_factory=EnvConfig)
    state: Optional[StateVec] = None
    t: int = 0
    done: bool = True

    def reset(self, seed: int) -> StateVec:
        self.state = reset(self.layout, self.config, seed)
        self.t = 0
        self.done = False
        return self.state

    def step(self, action) -> tuple[StateVec, float, bool]:
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        self.state, reward, self.done = step(self.state, action, self.layout, self.config, self.t)
        self.t += 1
        return self.state, reward, self.done
