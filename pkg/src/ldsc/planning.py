"""Task decomposition into landmark sequences and the subgoal relation tree.

A language model (or a fixture / hand-scripted stand-in) proposes k ordered
landmark sequences for a task. The sequences are merged into one rooted
graph whose nodes are landmark names, so a landmark mentioned by several
sequences appears once.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .envs import MazeLayout
from .smdp import StateVec, SubgoalSpec, TaskInstruction

log = logging.getLogger(__name__)

ROOT = "<s0>"

SCRIPTED_SEQUENCES: dict[str, list[list[str]]] = {
    "four_rooms": [["key", "lock"]],
    "point_maze": [["key", "remote", "door"]],
    "e_maze": [["key1", "key2", "goal"], ["key2", "key1", "goal"]],
    "tunnel": [
        ["checkpoint", "key1", "goal"],
        ["checkpoint", "key1", "key2", "goal"],
        ["checkpoint", "key2", "key1", "goal"],
    ],
}

DEFAULT_TASK_TEXT = {
    "four_rooms": "Pick up the key, then navigate to the lock in the top-left room.",
    "point_maze": "Retrieve the key (green ball), switch on the remote control (blue ball), then go to the door (red ball).",
    "e_maze": "Collect both keys (blue ball and green ball), then reach the goal (red ball).",
    "tunnel": "Go to the checkpoint, collect the green key to unlock the path, then proceed to the goal.",
}


def base_env_name(name: str) -> str:
    return name[len("mini_"):] if name.startswith("mini_") else name


# --------------------------------------------------------------------------- prompt


@dataclass(frozen=True)
class PromptBundle:
    task_id: int
    task_description: str
    state_representation: str
    goal_and_sequencing: str
    in_context_examples: tuple[str, ...]
    output_schema: str
    k: int

    def __post_init__(self):
        for name in ("task_description", "state_representation", "goal_and_sequencing", "output_schema"):
            if not getattr(self, name).strip():
                raise ValueError(f"prompt section {name} is empty")
        if not self.in_context_examples:
            raise ValueError("prompt needs at least one in-context example")

    def text(self) -> str:
        examples = "\n\n".join(self.in_context_examples)
        return (
            f"## Task description\n{self.task_description}\n\n"
            f"## State representation\n{self.state_representation}\n\n"
            f"## Goal and subgoal sequencing\n{self.goal_and_sequencing}\n\n"
            f"## Examples\n{examples}\n\n"
            f"## Output format\n{self.output_schema}\n"
        )


def _dependency_order(layout: MazeLayout) -> list[str]:
    """Landmarks topologically sorted by prerequisite flags, ties by layout order."""
    done: list[str] = []
    pending = list(layout.landmarks)
    while pending:
        ready = [lm for lm in pending if all(r in done for r in lm.required_flags)]
        if not ready:
            raise ValueError("landmark prerequisites form a cycle")
        done.append(ready[0].name)
        pending.remove(ready[0])
    return done


def build_prompt(task: TaskInstruction, s0: StateVec, layout: MazeLayout, k: int) -> PromptBundle:
    if not layout.landmarks:
        raise ValueError("layout has no landmarks")
    if k < 1:
        raise ValueError("k must be >= 1")
    registry = []
    for lm in layout.landmarks:
        req = ", ".join(lm.required_flags) if lm.required_flags else "none"
        registry.append(
            f"- {lm.name}: centre ({lm.region_center[0]:.2f}, {lm.region_center[1]:.2f}), "
            f"radius {lm.region_radius:.2f}, requires: {req}"
        )
    flags = ", ".join(f"{lm.name}={f}" for lm, f in zip(layout.landmarks, s0.flags))
    x0, y0, x1, y1 = layout.bounds
    state = (
        f"Robot pose: x={s0.x:.2f}, y={s0.y:.2f}, heading={s0.theta:.3f} rad.\n"
        f"Landmark flags: {flags or 'none'}.\n"
        f"Map bounds: [{x0:g}, {x1:g}] x [{y0:g}, {y1:g}] with {len(layout.walls)} wall segments.\n"
        "Landmarks (a landmark only counts once all of its required landmarks were visited):\n"
        + "\n".join(registry)
    )
    sequencing = (
        f"The final objective is the landmark '{task.goal_landmark}'. Propose {k} different ordered "
        "sequences of landmarks the robot should visit, each ending with the final objective. "
        "Respect every prerequisite. Use only landmark names from the list above."
    )
    order = _dependency_order(layout)
    goal_pos = order.index(task.goal_landmark)
    example_seq = order[: goal_pos + 1] if goal_pos >= 0 else order
    example = (
        "Example: a robot must reach the final objective, and each landmark lists what must be "
        "visited before it. Visiting landmarks so that every prerequisite comes first gives:\n"
        + json.dumps([example_seq])
    )
    schema = (
        f"Reply with a JSON array containing exactly {k} arrays of landmark-name strings, "
        'for example [["a", "b"], ["b", "a"]]. No other JSON.'
    )
    return PromptBundle(task.task_id, task.text, state, sequencing, (example,), schema, k)


# --------------------------------------------------------------------------- providers


class ProviderKind(str, enum.Enum):
    FIXTURE = "FIXTURE"
    SCRIPTED = "SCRIPTED"
    HTTP = "HTTP"


@dataclass
class ProviderMode:
    mode: ProviderKind
    path: Optional[str] = None
    env: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    auth_env: Optional[str] = None
    max_attempts: int = 3
    timeout: float = 60.0

    def __post_init__(self):
        self.mode = ProviderKind(self.mode)
        if self.mode is ProviderKind.FIXTURE and (not self.path or not Path(self.path).exists()):
            raise ValueError(f"fixture file {self.path!r} does not exist")
        if self.mode is ProviderKind.SCRIPTED and base_env_name(self.env or "") not in SCRIPTED_SEQUENCES:
            raise ValueError(f"no scripted decomposition for env {self.env!r}")
        if self.mode is ProviderKind.HTTP and not (self.endpoint and self.model and self.auth_env):
            raise ValueError("HTTP provider needs endpoint, model and auth_env")

    def to_dict(self) -> dict:
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "ProviderMode":
        return cls(**data)


class ProviderError(RuntimeError):
    def __init__(self, message: str, attempts: int = 0, retryable: bool = False):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable


def query_provider(
    prompt: PromptBundle,
    mode: ProviderMode,
    transcript_dir: Optional[Path] = None,
    client=None,
) -> str:
    """Return the raw decomposition text for ``prompt``."""
    if mode.mode is ProviderKind.SCRIPTED:
        raw = json.dumps(SCRIPTED_SEQUENCES[base_env_name(mode.env)])
    elif mode.mode is ProviderKind.FIXTURE:
        data = json.loads(Path(mode.path).read_text())
        entry = data.get(str(prompt.task_id))
        if entry is None or "raw" not in entry:
            raise ProviderError(f"fixture {mode.path} has no entry for task {prompt.task_id}")
        raw = entry["raw"]
    else:
        raw = _query_http(prompt, mode, client)
    if transcript_dir is not None:
        transcript_dir = Path(transcript_dir)
        transcript_dir.mkdir(parents=True, exist_ok=True)
        (transcript_dir / f"task_{prompt.task_id}.json").write_text(
            json.dumps({"provider": mode.to_dict(), "prompt": prompt.text(), "response": raw}, indent=2)
        )
    return raw


def _query_http(prompt: PromptBundle, mode: ProviderMode, client=None) -> str:
    import httpx

    token = os.environ.get(mode.auth_env or "")
    if not token:
        raise ProviderError(f"environment variable {mode.auth_env} is not set", attempts=0, retryable=False)
    body = {"model": mode.model, "messages": [{"role": "user", "content": prompt.text()}]}
    headers = {"Authorization": f"Bearer {token}"}
    own_client = client is None
    client = client or httpx.Client(timeout=mode.timeout)
    last = None
    try:
        for attempt in range(1, mode.max_attempts + 1):
            try:
                resp = client.post(mode.endpoint, json=body, headers=headers)
                if resp.status_code in (401, 403):
                    raise ProviderError(f"auth failure ({resp.status_code})", attempt, retryable=True)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except ProviderError as exc:
                last = exc
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = ProviderError(f"transport failure: {exc}", attempt, retryable=True)
            log.warning("provider attempt %d/%d failed: %s", attempt, mode.max_attempts, last)
            if attempt < mode.max_attempts:
                time.sleep(min(2.0, 0.1 * 2**attempt))
    finally:
        if own_client:
            client.close()
    raise ProviderError(f"{last} after {mode.max_attempts} attempts", mode.max_attempts, retryable=True)


# --------------------------------------------------------------------------- parsing


class DecompositionError(ValueError):
    pass


class UnknownLandmarkError(DecompositionError):
    def __init__(self, name: str):
        super().__init__(f"unknown landmark {name!r}")
        self.name = name


def _is_sequence_list(obj) -> bool:
    return (
        isinstance(obj, list)
        and len(obj) > 0
        and all(isinstance(seq, list) and seq and all(isinstance(n, str) for n in seq) for seq in obj)
    )


def parse_sequences(raw, layout: MazeLayout) -> list[list[str]]:
    """Extract the first JSON array of landmark-name arrays found in ``raw``."""
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    decoder = json.JSONDecoder()
    found = None
    pos = raw.find("[")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except (ValueError, RecursionError):
            obj = None
        if _is_sequence_list(obj):
            found = obj
            break
        pos = raw.find("[", pos + 1)
    if found is None:
        raise DecompositionError("unparseable decomposition")
    known = set(layout.landmark_names)
    out: list[list[str]] = []
    for seq in found:
        for name in seq:
            if name not in known:
                raise UnknownLandmarkError(name)
        if seq not in out:
            out.append(list(seq))
    return out


# --------------------------------------------------------------------------- tree


@dataclass
class SubgoalTree:
    root_state: StateVec
    goal_landmark: str
    nodes: dict[str, Optional[SubgoalSpec]] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)
    depth_limit: int = 6
    branch_limit: int = 4

    def children(self, name: str) -> list[str]:
        return [c for p, c in self.edges if p == name]

    def reaches(self, src: str, dst: str) -> bool:
        seen, stack = set(), [src]
        while stack:
            n = stack.pop()
            if n == dst:
                return True
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.children(n))
        return False

    def is_rooted_dag(self) -> bool:
        if any(c == ROOT for _, c in self.edges) or len(set(self.edges)) != len(self.edges):
            return False
        if any(self.reaches(c, p) for p, c in self.edges):
            return False
        return all(self.reaches(ROOT, n) for n in self.nodes)

    def subgoal_names(self) -> list[str]:
        return [n for n in self.nodes if n != ROOT]

    def snapshot(self) -> dict:
        return {
            "root": {"name": ROOT, "state": [self.root_state.x, self.root_state.y, self.root_state.theta]},
            "nodes": list(self.nodes),
            "edges": [list(e) for e in self.edges],
            "goal_landmark": self.goal_landmark,
            "depth_limit": self.depth_limit,
            "branch_limit": self.branch_limit,
        }


def build_tree(
    s0: StateVec,
    sequences: Sequence[Sequence[str]],
    layout: MazeLayout,
    depth_limit: int = 6,
    branch_limit: int = 4,
    goal_landmark: Optional[str] = None,
) -> SubgoalTree:
    """Union the proposed sequences into a rooted graph keyed by landmark name.

    An edge is added only if absent. An edge that would close a cycle (two
    sequences visiting the same pair in opposite orders) is skipped while
    the walk continues from the existing node.
    """
    if not sequences:
        raise DecompositionError("no sequences to build a tree from")
    goal = goal_landmark or layout.goal_landmark
    tree = SubgoalTree(s0, goal, {ROOT: None}, [], depth_limit, branch_limit)
    complete = False
    for seq in sequences:
        parent = ROOT
        for depth, name in enumerate(seq, start=1):
            if depth > depth_limit:
                break
            if (parent, name) not in tree.edges:
                if len(tree.children(parent)) >= branch_limit:
                    break
                if parent == name or (name in tree.nodes and tree.reaches(name, parent)):
                    parent = name
                    continue
                tree.edges.append((parent, name))
                tree.nodes.setdefault(name, layout.landmark(name))
            parent = name
            if name == goal:
                complete = True
                break
    if not complete:
        raise DecompositionError("no complete decomposition")
    return tree


def next_subgoal_candidates(tree: SubgoalTree, attained: Iterable[str], current: str = ROOT) -> list[SubgoalSpec]:
    """Unattained successors of the root, the current node or any attained node.

    A successor is offered only once its prerequisites that are themselves
    tree nodes have been attained.
    """
    if current not in tree.nodes:
        raise KeyError(f"{current!r} is not a tree node")
    attained = set(attained)
    frontier = {ROOT, current} | (attained & set(tree.nodes))
    names = set()
    for p, c in tree.edges:
        if p in frontier and c not in attained:
            spec = tree.nodes[c]
            if all(r in attained for r in spec.required_flags if r in tree.nodes):
                names.add(c)
    return [tree.nodes[n] for n in sorted(names)]


def decompose(
    task: TaskInstruction,
    s0: StateVec,
    layout: MazeLayout,
    mode: ProviderMode,
    k: int = 3,
    depth_limit: int = 6,
    branch_limit: int = 4,
    transcript_dir: Optional[Path] = None,
) -> SubgoalTree:
    prompt = build_prompt(task, s0, layout, k)
    raw = query_provider(prompt, mode, transcript_dir)
    sequences = parse_sequences(raw, layout)
    return build_tree(s0, sequences, layout, depth_limit, branch_limit, task.goal_landmark)
