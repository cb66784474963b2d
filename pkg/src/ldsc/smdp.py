"""Semi-MDP building blocks shared by every level of the hierarchy.

States, subgoal regions, option definitions and SMDP transitions live here,
together with the two rules everything else leans on: discounting a
variable-length reward sequence and deciding which options may start in a
given state.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    # float modulo can land exactly on +pi for inputs like -pi - tiny
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class StateVec:
    x: float
    y: float
    theta: float = 0.0
    v: float = 0.0
    omega: float = 0.0
    flags: tuple[int, ...] = ()

    def __post_init__(self):
        if not -math.pi <= self.theta < math.pi:
            raise ValueError(f"theta {self.theta} outside [-pi, pi)")
        if any(f not in (0, 1) for f in self.flags):
            raise ValueError(f"flags must be binary, got {self.flags}")

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def with_flags(self, flags: Sequence[int]) -> "StateVec":
        return replace(self, flags=tuple(int(f) for f in flags))


@dataclass(frozen=True)
class TaskInstruction:
    task_id: int
    text: str
    goal_landmark: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("task instruction text must be non-empty")


@dataclass(frozen=True)
class SubgoalSpec:
    """A named landmark region; attained when inside it with prerequisites set.

    ``required_flags`` holds landmark names. ``flag_index`` maps each landmark
    of the owning layout to its slot in ``StateVec.flags`` so membership can be
    evaluated on a bare state.
    """

    name: str
    region_center: tuple[float, float]
    region_radius: float
    required_flags: tuple[str, ...] = ()
    flag_index: tuple[tuple[str, int], ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.region_radius <= 0:
            raise ValueError(f"landmark {self.name!r}: region_radius must be > 0")

    def flags_satisfied(self, state: StateVec) -> bool:
        index = dict(self.flag_index)
        for req in self.required_flags:
            slot = index.get(req)
            if slot is None or slot >= len(state.flags) or not state.flags[slot]:
                return False
        return True

    def in_region(self, state: StateVec) -> bool:
        cx, cy = self.region_center
        return math.hypot(state.x - cx, state.y - cy) <= self.region_radius

    def attained(self, state: StateVec) -> bool:
        return self.in_region(state) and self.flags_satisfied(state)


class OptionKind(str, enum.Enum):
    GLOBAL = "GLOBAL"
    GOAL = "GOAL"
    CHAIN = "CHAIN"


@dataclass(eq=False)
class OptionDef:
    """An option (I, pi, beta) with a time budget.

    ``initiation`` is None for options that may start anywhere; otherwise an
    object exposing ``contains(state)`` and ``trained``. CHAIN options
    terminate inside their parent's initiation set instead of the subgoal
    region.
    """

    option_id: int
    subgoal: SubgoalSpec
    kind: OptionKind
    budget_T: int
    initiation: Optional[object] = None
    policy_handle: Optional[object] = None
    parent: Optional["OptionDef"] = None
    depth: int = 0

    def __post_init__(self):
        if self.budget_T < 1:
            raise ValueError("budget_T must be >= 1")
        if self.kind is OptionKind.GLOBAL and self.initiation is not None:
            raise ValueError("GLOBAL options are initiable everywhere")
        if self.kind is OptionKind.CHAIN and self.parent is None:
            raise ValueError("CHAIN options need a parent")

    @property
    def trained(self) -> bool:
        return self.initiation is None or bool(getattr(self.initiation, "trained", False))

    def initiates(self, state: StateVec) -> bool:
        if self.initiation is None:
            return True
        return bool(self.initiation.contains(state))

    def terminates(self, state: StateVec) -> bool:
        if self.kind is OptionKind.CHAIN:
            return bool(self.parent.initiation.contains(state))
        return self.subgoal.attained(state)

    def target_point(self) -> tuple[float, float]:
        """Centre of the termination set, used as the option's steering target."""
        if self.kind is OptionKind.CHAIN:
            return self.parent.initiation.center()
        return self.subgoal.region_center

    def __repr__(self):
        return f"OptionDef(id={self.option_id}, {self.kind.value}, subgoal={self.subgoal.name!r}, T={self.budget_T})"


@dataclass(frozen=True)
class SmdpTransition:
    s: StateVec
    choice_id: int
    rewards: tuple[float, ...]
    tau: int
    s_next: StateVec
    terminal: bool

    def __post_init__(self):
        if self.tau < 1 or self.tau != len(self.rewards):
            raise ValueError(f"tau={self.tau} must equal len(rewards)={len(self.rewards)} >= 1")


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of gamma**k * rewards[k] over the option's duration."""
    if len(rewards) == 0:
        raise ValueError("empty reward sequence")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    total = 0.0
    discount = 1.0
    for r in rewards:
        total += discount * r
        discount *= gamma
    return total


def option_available(
    option: OptionDef,
    state: StateVec,
    classifier_eval: Optional[Callable[[OptionDef, StateVec], bool]] = None,
) -> bool:
    """Initiation holds and the option's termination condition does not."""
    initiates = classifier_eval(option, state) if classifier_eval else option.initiates(state)
    return bool(initiates) and not option.terminates(state)


class AvailabilityError(RuntimeError):
    pass


def available_options(repertoire: Sequence[OptionDef], state: StateVec) -> list[OptionDef]:
    """Options that may be invoked at ``state``, in option_id order.

    Untrained options are never part of the selectable set.
    """
    if not repertoire:
        raise ValueError("repertoire must be non-empty")
    chosen = [o for o in repertoire if o.trained and option_available(o, state)]
    chosen.sort(key=lambda o: o.option_id)
    for o in repertoire:
        if o.kind is OptionKind.GLOBAL and not o.terminates(state) and o not in chosen:
            raise AvailabilityError(f"global option {o.option_id} unavailable off-goal")
    return chosen
