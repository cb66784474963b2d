"""Option discovery: global and goal options, gestation, box initiation sets, chaining.

An option learns where it may start from the tail ends of successful runs
into its termination set. Once trained, a child option is spawned whose job
is to reach the parent's initiation box, growing a chain backward from the
subgoal toward where the agent usually starts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .smdp import OptionDef, OptionKind, StateVec, SubgoalSpec


class InitiationMode(str, enum.Enum):
    ALWAYS = "ALWAYS"
    BOX = "BOX"


@dataclass(frozen=True)
class InitiationClassifier:
    mode: InitiationMode = InitiationMode.BOX
    lo: tuple[float, float] = (0.0, 0.0)
    hi: tuple[float, float] = (0.0, 0.0)
    margin: float = 0.5
    trained: bool = False
    positive_count: int = 0

    def __post_init__(self):
        if self.mode is InitiationMode.BOX and any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box needs lo <= hi, got {self.lo} / {self.hi}")

    def contains(self, state: StateVec) -> bool:
        if self.mode is InitiationMode.ALWAYS:
            return True
        if not self.trained:
            return False
        return self.lo[0] <= state.x <= self.hi[0] and self.lo[1] <= state.y <= self.hi[1]

    def center(self) -> tuple[float, float]:
        return ((self.lo[0] + self.hi[0]) / 2.0, (self.lo[1] + self.hi[1]) / 2.0)


def learn_initiation_classifier(
    classifier: InitiationClassifier,
    positives: Sequence[StateVec],
    successes: int,
    threshold: int = 5,
) -> InitiationClassifier:
    """Fit a margin-padded bounding box over positive positions.

    Below ``threshold`` recorded successes the classifier stays untrained.
    """
    if successes < threshold or not positives:
        return replace(classifier, positive_count=successes, trained=False)
    xy = np.array([(s.x, s.y) for s in positives])
    lo = xy.min(axis=0) - classifier.margin
    hi = xy.max(axis=0) + classifier.margin
    return replace(
        classifier,
        mode=InitiationMode.BOX,
        lo=(float(lo[0]), float(lo[1])),
        hi=(float(hi[0]), float(hi[1])),
        trained=True,
        positive_count=successes,
    )


@dataclass
class GestationBuffer:
    k_seg: int = 10
    positives: dict[int, list[StateVec]] = field(default_factory=dict)
    successes: dict[int, int] = field(default_factory=dict)

    def count(self, option_id: int) -> int:
        return self.successes.get(option_id, 0)


def record_success(buffer: GestationBuffer, option: OptionDef, trajectory: Sequence[StateVec]) -> None:
    """Store the last ``k_seg`` states of a run that ended in ``option``'s termination set."""
    if not trajectory or not option.terminates(trajectory[-1]):
        raise ValueError(f"trajectory does not end in option {option.option_id}'s termination set")
    buffer.positives.setdefault(option.option_id, []).extend(trajectory[-buffer.k_seg:])
    buffer.successes[option.option_id] = buffer.count(option.option_id) + 1


def start_covered(subgoal_name: str, start: StateVec, repertoire: Iterable[OptionDef]) -> bool:
    """Is ``start`` inside a trained initiation box of an option serving this subgoal?"""
    for o in repertoire:
        if o.subgoal.name == subgoal_name and o.initiation is not None and o.trained and o.initiates(start):
            return True
    return False


def should_chain(
    terminated_option: OptionDef,
    final_state: StateVec,
    episode_start: StateVec,
    repertoire: Iterable[OptionDef],
) -> bool:
    return terminated_option.terminates(final_state) and not start_covered(
        terminated_option.subgoal.name, episode_start, repertoire
    )


class OptionTreeError(ValueError):
    pass


class OptionTree:
    """All options created so far plus parent -> child chaining edges."""

    def __init__(self, t0: int = 100, margin: float = 0.5, max_chain_depth: int = 4, global_budget: int = 1):
        self.t0 = t0
        self.margin = margin
        self.max_chain_depth = max_chain_depth
        self.global_budget = global_budget
        self.nodes: list[OptionDef] = []
        self.edges: list[tuple[int, int]] = []
        self.roots: dict[str, int] = {}
        self._globals: dict[str, OptionDef] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def by_id(self, option_id: int) -> OptionDef:
        for o in self.nodes:
            if o.option_id == option_id:
                return o
        raise KeyError(option_id)

    def global_option(self, subgoal_name: str) -> OptionDef:
        return self._globals[subgoal_name]

    def options_for(self, subgoal_name: str) -> list[OptionDef]:
        return [o for o in self.nodes if o.subgoal.name == subgoal_name]

    def create_global_option(self, subgoal: SubgoalSpec, policy=None) -> OptionDef:
        if subgoal.name in self._globals:
            raise OptionTreeError(f"global option for {subgoal.name!r} already exists")
        o = OptionDef(self._new_id(), subgoal, OptionKind.GLOBAL, self.global_budget, None, policy)
        self._globals[subgoal.name] = o
        self.nodes.append(o)
        return o

    def create_goal_option(self, subgoal: SubgoalSpec, policy=None) -> OptionDef:
        if subgoal.name in self.roots:
            raise OptionTreeError(f"goal option for {subgoal.name!r} already exists")
        o = OptionDef(
            self._new_id(), subgoal, OptionKind.GOAL, self.t0, InitiationClassifier(margin=self.margin), policy
        )
        self.roots[subgoal.name] = o.option_id
        self.nodes.append(o)
        return o

    def create_child_option(self, parent: OptionDef, policy=None) -> Optional[OptionDef]:
        """Spawn an option terminating in ``parent``'s initiation box.

        Returns None when the chain is already ``max_chain_depth`` deep.
        """
        if parent.initiation is None or not parent.trained:
            raise OptionTreeError(f"option {parent.option_id} has no trained initiation set")
        if parent.depth + 1 > self.max_chain_depth:
            return None
        child = OptionDef(
            self._new_id(),
            parent.subgoal,
            OptionKind.CHAIN,
            self.t0,
            InitiationClassifier(margin=self.margin),
            policy,
            parent=parent,
            depth=parent.depth + 1,
        )
        self.nodes.append(child)
        self.edges.append((parent.option_id, child.option_id))
        return child

    def is_acyclic(self) -> bool:
        children: dict[int, list[int]] = {}
        for p, c in self.edges:
            children.setdefault(p, []).append(c)
        state: dict[int, int] = {}

        def visit(n) -> bool:
            state[n] = 1
            for c in children.get(n, []):
                if state.get(c) == 1 or (c not in state and not visit(c)):
                    return False
            state[n] = 2
            return True

        return all(visit(n.option_id) for n in self.nodes if n.option_id not in state)

    def snapshot(self) -> dict:
        nodes = []
        for o in self.nodes:
            box = None
            if o.initiation is not None and o.trained:
                box = {"lo": list(o.initiation.lo), "hi": list(o.initiation.hi)}
            nodes.append(
                {
                    "id": o.option_id,
                    "kind": o.kind.value,
                    "subgoal": o.subgoal.name,
                    "box": box,
                    "trained": o.trained,
                    "budget": o.budget_T,
                    "depth": o.depth,
                }
            )
        return {"nodes": nodes, "edges": [list(e) for e in self.edges]}
