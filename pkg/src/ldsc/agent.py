"""The three-level control loop: subgoal policy, option policy, intra-option actors.

``LdscAgent`` is built once per experiment from the decomposed tasks. Each
episode alternates subgoal choice (tree-restricted, Q-learned), option
choice (availability-restricted, Q-learned per subgoal) and option
execution (DDPG actors), while untrained options gestate and chain backward.
The DSC baseline is the same machinery with a single-node subgoal tree; the
flat baseline is one DDPG learner on the raw environment reward.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ddpg import DdpgAgent, intra_option_reward
from .dqn import DiscreteQPolicy, LinearSchedule, SmdpExperience
from .envs import EnvConfig, MazeEnv, MazeLayout
from .planning import (
    ROOT,
    ProviderMode,
    SubgoalTree,
    build_tree,
    decompose,
    next_subgoal_candidates,
)
from .skills import (
    GestationBuffer,
    OptionTree,
    learn_initiation_classifier,
    record_success,
    should_chain,
    start_covered,
)
from .smdp import OptionDef, OptionKind, StateVec, SubgoalSpec, TaskInstruction, available_options, option_available

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    gamma: float = 0.99
    batch_size: int = 64
    tau: float = 0.01
    ddpg_hidden: tuple[int, ...] = (400, 300)
    dqn_hidden: tuple[int, ...] = (32, 32)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    actor_preact_l2: float = 1e-2
    dqn_lr: float = 1e-3
    t0: int = 100
    global_budget: int = 1
    gestation_threshold: int = 5
    k_seg: int = 10
    margin: float = 0.5
    max_chain_depth: int = 4
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.2
    noise_start: float = 0.3
    noise_end: float = 0.05
    noise_decay_fraction: float = 0.5
    dqn_capacity: int = 100_000
    ddpg_capacity: int = 100_000
    k_sequences: int = 3
    depth_limit: int = 6
    branch_limit: int = 4
    warm_start_options: bool = True
    share_sibling_replay: bool = True
    total_episodes: int = 300

    def __post_init__(self):
        self.ddpg_hidden = tuple(self.ddpg_hidden)
        self.dqn_hidden = tuple(self.dqn_hidden)
        if self.gestation_threshold < 1 or self.k_seg < 1 or self.t0 < 1 or self.global_budget < 1:
            raise ValueError("gestation_threshold, k_seg, t0 and global_budget must be >= 1")


# --------------------------------------------------------------------------- features


def state_features(state: StateVec, layout: MazeLayout) -> np.ndarray:
    x0, y0, x1, y1 = layout.bounds
    half = layout.scale / 2.0
    return np.array(
        [
            (state.x - (x0 + x1) / 2.0) / half,
            (state.y - (y0 + y1) / 2.0) / half,
            math.cos(state.theta),
            math.sin(state.theta),
            state.v,
            state.omega,
            *state.flags,
        ]
    )


def option_features(state: StateVec, option: OptionDef, layout: MazeLayout) -> np.ndarray:
    """State features plus the option target's offset in the robot frame."""
    tx, ty = option.target_point()
    dx, dy = tx - state.x, ty - state.y
    c, s = math.cos(state.theta), math.sin(state.theta)
    scale = layout.scale
    rel = [(c * dx + s * dy) / scale, (-s * dx + c * dy) / scale, math.hypot(dx, dy) / scale]
    return np.concatenate([state_features(state, layout), rel])


# --------------------------------------------------------------------------- results


@dataclass
class EpisodeResult:
    task_id: int
    success: bool
    steps: int
    ret: float
    subgoal_times: list[tuple[str, int]] = field(default_factory=list)
    options: list[tuple[int, int]] = field(default_factory=list)
    landmarks_attained: int = 0
    repertoire_size: int = 0


class InitiationViolated(RuntimeError):
    pass


# --------------------------------------------------------------------------- LDSC


class LdscAgent:
    def __init__(
        self,
        tasks: Sequence[TaskInstruction],
        layout: MazeLayout,
        trees: dict[int, SubgoalTree],
        config: AgentConfig,
        env_config: EnvConfig,
        seed: int = 0,
    ):
        self.tasks = list(tasks)
        self.layout = layout
        self.trees = trees
        self.config = config
        self.env_config = env_config
        self.rng = np.random.default_rng(seed)
        self.task_index = {t.task_id: i for i, t in enumerate(self.tasks)}

        self.subgoals: dict[str, SubgoalSpec] = {}
        for t in self.tasks:
            for name in trees[t.task_id].subgoal_names():
                spec = trees[t.task_id].nodes[name]
                known = self.subgoals.get(name)
                if known is not None and (known.region_center, known.region_radius) != (spec.region_center, spec.region_radius):
                    raise ValueError(f"subgoal {name!r} grounded to two different regions")
                self.subgoals.setdefault(name, spec)
        self.subgoal_names = list(self.subgoals)

        self.state_dim = len(state_features(self._dummy_state(), layout))
        self.option_dim = self.state_dim + 3
        c = config
        eps = LinearSchedule(c.epsilon_start, c.epsilon_end, int(c.epsilon_decay_fraction * c.total_episodes))
        self.subgoal_policy = DiscreteQPolicy(
            self.state_dim + len(self.tasks),
            len(self.subgoal_names),
            c.dqn_hidden,
            c.gamma,
            c.dqn_lr,
            c.tau,
            c.batch_size,
            c.dqn_capacity,
            eps,
            self._spawn_rng(),
        )
        self.option_policies: dict[str, DiscreteQPolicy] = {}
        self.tree = OptionTree(c.t0, c.margin, c.max_chain_depth, c.global_budget)
        self.repertoire: list[OptionDef] = []
        self.untrained: list[OptionDef] = []
        self.slots: dict[int, int] = {}
        self.gestation = GestationBuffer(c.k_seg)
        self.buffer_B: list[tuple[float, StateVec]] = []
        self.episode = 0
        self.trace: list[str] = []
        for name in self.subgoal_names:
            self._register_subgoal(self.subgoals[name])

    # ---- construction helpers

    def _dummy_state(self) -> StateVec:
        return StateVec(0.0, 0.0, 0.0, 0.0, 0.0, (0,) * len(self.layout.landmarks))

    def _spawn_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng.integers(2**63))

    def _new_actor(self) -> DdpgAgent:
        c = self.config
        noise = LinearSchedule(c.noise_start, c.noise_end, int(c.noise_decay_fraction * c.total_episodes))
        return DdpgAgent(
            self.option_dim,
            2,
            self.env_config.action_bound,
            c.ddpg_hidden,
            c.gamma,
            c.actor_lr,
            c.critic_lr,
            c.tau,
            c.batch_size,
            c.ddpg_capacity,
            noise,
            self._spawn_rng(),
            c.actor_preact_l2,
            (-self.layout.step_penalty / (1.0 - c.gamma), 1.0),
        )

    def _register_subgoal(self, spec: SubgoalSpec) -> None:
        c = self.config
        g = self.tree.create_global_option(spec, self._new_actor())
        self.repertoire.append(g)
        self.slots[g.option_id] = 0
        goal = self.tree.create_goal_option(spec, self._new_actor())
        self.untrained.append(goal)
        self.slots[goal.option_id] = 1
        eps = LinearSchedule(c.epsilon_start, c.epsilon_end, int(c.epsilon_decay_fraction * c.total_episodes))
        self.option_policies[spec.name] = DiscreteQPolicy(
            self.state_dim,
            2 + c.max_chain_depth,
            c.dqn_hidden,
            c.gamma,
            c.dqn_lr,
            c.tau,
            c.batch_size,
            c.dqn_capacity,
            eps,
            self._spawn_rng(),
        )

    # ---- views

    def options_for(self, subgoal_name: str) -> list[OptionDef]:
        return [o for o in self.repertoire if o.subgoal.name == subgoal_name]

    def subgoal_context(self, state: StateVec, task_id: int) -> np.ndarray:
        onehot = np.zeros(len(self.tasks))
        onehot[self.task_index[task_id]] = 1.0
        return np.concatenate([state_features(state, self.layout), onehot])

    def _attained_names(self, state: StateVec) -> set[str]:
        return {lm.name for lm, f in zip(self.layout.landmarks, state.flags) if f}

    def set_episode(self, episode: int) -> None:
        self.episode = episode
        self.subgoal_policy.schedule_clock = episode
        for p in self.option_policies.values():
            p.schedule_clock = episode
        for o in self.tree.nodes:
            o.policy_handle.schedule_clock = episode

    # ---- option execution

    def execute_option(self, env: MazeEnv, state: StateVec, option: OptionDef, explore: bool = True, train: bool = True):
        """Run ``option`` until it terminates, its budget is spent or the episode ends.

        Returns (env rewards, final state, steps used, local_done, visited states).
        """
        if not option_available(option, state):
            raise InitiationViolated("initiation violated")
        actor: DdpgAgent = option.policy_handle
        # options ending in the same set see identical pseudo-rewards, so they share experience
        siblings = [o.policy_handle for o in self._same_termination(option) if o.policy_handle is not actor] if self.config.share_sibling_replay else []
        rewards: list[float] = []
        visited: list[StateVec] = []
        s = state
        local_done = False
        for _ in range(option.budget_T):
            ctx = option_features(s, option, self.layout)
            a = actor.act(ctx, explore)
            s2, r, done = env.step(a)
            pseudo, local_done = intra_option_reward(s, s2, option, self.layout.step_penalty)
            if train:
                ctx2 = option_features(s2, option, self.layout)
                actor.push(ctx, a, pseudo, ctx2, local_done)
                for twin in siblings:
                    twin.push(ctx, a, pseudo, ctx2, local_done)
                    twin.maybe_train()
                actor.maybe_train()
            rewards.append(r)
            visited.append(s2)
            s = s2
            if local_done or done:
                break
        return rewards, s, len(rewards), local_done, visited

    def _same_termination(self, option: OptionDef) -> list[OptionDef]:
        if option.kind is OptionKind.CHAIN:
            return [option]
        return [
            o for o in self.tree.options_for(option.subgoal.name)
            if o.kind is not OptionKind.CHAIN and (o in self.repertoire or o is option)
        ]

    # ---- discovery

    def maybe_discover(
        self,
        subgoal_name: str,
        final_state: StateVec,
        segment_start: StateVec,
        trajectory: Sequence[StateVec],
        credited: set[int],
    ) -> list[str]:
        """Credit untrained options whose termination set was just entered; promote and chain."""
        events = []
        for o_k in list(self.untrained):
            if o_k.subgoal.name != subgoal_name or o_k.option_id in credited:
                continue
            if not o_k.terminates(final_state):
                continue
            if start_covered(subgoal_name, segment_start, self.repertoire):
                continue
            credited.add(o_k.option_id)
            record_success(self.gestation, o_k, trajectory)
            o_k.initiation = learn_initiation_classifier(
                o_k.initiation,
                self.gestation.positives[o_k.option_id],
                self.gestation.count(o_k.option_id),
                self.config.gestation_threshold,
            )
            events.append(f"success:{o_k.option_id}")
            if o_k.initiation.trained:
                events.extend(self._promote(o_k, final_state, segment_start))
        return events

    def _promote(self, o_k: OptionDef, final_state: StateVec, segment_start: StateVec) -> list[str]:
        self.untrained.remove(o_k)
        if self.config.warm_start_options:
            fresh: DdpgAgent = o_k.policy_handle
            o_k.policy_handle = self.tree.global_option(o_k.subgoal.name).policy_handle.clone(fresh.rng)
            if o_k.kind is OptionKind.CHAIN:
                # inherited transitions were rewarded for a different termination set
                o_k.policy_handle.replay = fresh.replay
        self.repertoire.append(o_k)
        events = [f"promote:{o_k.option_id}"]
        if should_chain(o_k, final_state, segment_start, self.repertoire):
            child = self.tree.create_child_option(o_k, self._new_actor())
            if child is not None:
                self.slots[child.option_id] = 1 + child.depth
                self.untrained.append(child)
                events.append(f"chain:{o_k.option_id}->{child.option_id}")
        return events

    # ---- episode loop

    def run_episode(self, env: MazeEnv, task: TaskInstruction, seed: int, explore: bool = True, train: bool = True) -> EpisodeResult:
        tree = self.trees[task.task_id]
        s = env.reset(seed)
        result = EpisodeResult(task.task_id, False, 0, 0.0)
        attained = self._attained_names(s) & set(tree.nodes)
        current = ROOT
        self.buffer_B = []
        segment_start = s
        segment_states: list[StateVec] = [s]
        credited: set[int] = set()
        goal_ctx = None
        g_name: Optional[str] = None

        while not env.done:
            cands = next_subgoal_candidates(tree, attained, current)
            if not cands:
                # tree exhausted without the final objective: fall back to it directly
                cands = [tree.nodes.get(task.goal_landmark) or self.layout.landmark(task.goal_landmark)]
            cand_names = [c.name for c in cands]
            if g_name not in cand_names:
                idx = self.subgoal_policy.select(
                    self.subgoal_context(s, task.task_id), [self.subgoal_names.index(n) for n in cand_names], explore
                )
                g_name = self.subgoal_names[idx]
                goal_ctx = self.subgoal_context(s, task.task_id)

            o_pol = self.option_policies[g_name]
            avail = available_options(self.options_for(g_name), s)
            o_ctx = state_features(s, self.layout)
            head = o_pol.select(o_ctx, [self.slots[o.option_id] for o in avail], explore)
            option = next(o for o in avail if self.slots[o.option_id] == head)

            rewards, s2, tau, local_done, visited = self.execute_option(env, s, option, explore, train)
            result.options.append((option.option_id, tau))
            result.ret += sum(rewards)
            success = env.done and env.state.flags[self.layout.landmark_names.index(task.goal_landmark)] == 1

            g_met = self.subgoals[g_name].attained(s2)
            if train:
                next_heads = ()
                if not (g_met or success):
                    next_heads = tuple(self.slots[o.option_id] for o in available_options(self.options_for(g_name), s2))
                o_pol.push(
                    SmdpExperience(
                        o_ctx, head, tuple(rewards), tau, state_features(s2, self.layout), next_heads, g_met or success
                    )
                )
                o_pol.maybe_train()

            self.buffer_B.extend((r, st) for r, st in zip(rewards, visited))
            segment_states.extend(visited)
            if train:
                events = self.maybe_discover(g_name, s2, segment_start, segment_states, credited)
                self.trace.extend(events)

            new = (self._attained_names(s2) & set(tree.nodes)) - attained
            if new:
                for name in sorted(new):
                    result.subgoal_times.append((name, env.t))
                attained |= new
                if g_name in new:
                    current = g_name
                if train:
                    nxt = next_subgoal_candidates(tree, attained, current)
                    nxt_idx = tuple(self.subgoal_names.index(c.name) for c in nxt)
                    self.subgoal_policy.push(
                        SmdpExperience(
                            goal_ctx,
                            self.subgoal_names.index(g_name),
                            tuple(r for r, _ in self.buffer_B),
                            len(self.buffer_B),
                            self.subgoal_context(s2, task.task_id),
                            nxt_idx,
                            success or not nxt_idx,
                        )
                    )
                    self.subgoal_policy.maybe_train()
                self.trace.append(f"clear_B:{env.t}")
                self.buffer_B = []
                segment_start = s2
                segment_states = [s2]
                credited = set()
                g_name = None
            s = s2

        result.success = bool(env.state.flags[self.layout.landmark_names.index(task.goal_landmark)])
        result.steps = env.t
        result.landmarks_attained = int(sum(env.state.flags))
        result.repertoire_size = len(self.repertoire)
        return result

    # ---- persistence

    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / "options").mkdir(parents=True, exist_ok=True)
        manifest = {"options": [], "repertoire": [o.option_id for o in self.repertoire],
                    "untrained": [o.option_id for o in self.untrained], "subgoals": self.subgoal_names,
                    "config": asdict(self.config), "episode": self.episode}
        for o in self.tree.nodes:
            fname = f"options/option_{o.option_id}.json"
            o.policy_handle.save(directory / fname)
            entry = {"option_id": o.option_id, "kind": o.kind.value, "subgoal": o.subgoal.name,
                     "budget": o.budget_T, "slot": self.slots[o.option_id], "file": fname,
                     "parent": o.parent.option_id if o.parent else None, "depth": o.depth,
                     "box": None}
            if o.initiation is not None:
                entry["box"] = {"lo": list(o.initiation.lo), "hi": list(o.initiation.hi),
                                "trained": o.initiation.trained, "positive_count": o.initiation.positive_count}
            manifest["options"].append(entry)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        self.subgoal_policy.save(directory / "subgoal_policy", self.subgoal_names, {"task_onehot": [t.task_id for t in self.tasks]})
        for name, pol in self.option_policies.items():
            heads = {self.slots[o.option_id]: o.option_id for o in self.tree.options_for(name)}
            pol.save(directory / f"option_policy_{name}", [heads.get(i, "unused") for i in range(pol.candidate_count)],
                     {"subgoal": name})
        (directory / "option_tree.json").write_text(json.dumps(self.tree.snapshot(), indent=2))
        trees = {str(tid): t.snapshot() for tid, t in self.trees.items()}
        (directory / "subgoal_trees.json").write_text(json.dumps(trees, indent=2))

    def load(self, directory) -> None:
        """Restore weights, boxes and repertoire saved by ``save`` into a freshly bootstrapped agent."""
        from .skills import InitiationClassifier, InitiationMode

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        by_id = {o.option_id: o for o in self.tree.nodes}
        for entry in sorted(manifest["options"], key=lambda e: e["option_id"]):
            oid = entry["option_id"]
            if oid not in by_id:
                parent = by_id[entry["parent"]]
                child = self.tree.create_child_option(parent, self._new_actor())
                assert child is not None and child.option_id == oid, "option ids diverged while restoring"
                self.slots[oid] = entry["slot"]
                by_id[oid] = child
            o = by_id[oid]
            o.policy_handle.load(directory / entry["file"])
            if entry["box"] is not None:
                b = entry["box"]
                o.initiation = InitiationClassifier(InitiationMode.BOX, tuple(b["lo"]), tuple(b["hi"]),
                                                    self.config.margin, b["trained"], b["positive_count"])
        self.repertoire = [by_id[i] for i in manifest["repertoire"]]
        self.untrained = [by_id[i] for i in manifest["untrained"]]
        self.subgoal_policy.load_weights(directory / "subgoal_policy")
        for name, pol in self.option_policies.items():
            pol.load_weights(directory / f"option_policy_{name}")


def bootstrap(
    tasks: Sequence[TaskInstruction],
    layout: MazeLayout,
    provider: ProviderMode,
    config: Optional[AgentConfig] = None,
    env_config: Optional[EnvConfig] = None,
    seed: int = 0,
    transcript_dir: Optional[Path] = None,
) -> LdscAgent:
    """Decompose every task once, then create global and goal options for each new subgoal."""
    if not tasks:
        raise ValueError("no tasks given")
    config = config or AgentConfig()
    env_config = env_config or EnvConfig()
    from .envs import reset

    trees = {}
    for task in tasks:
        s0 = reset(layout, env_config, seed)
        trees[task.task_id] = decompose(
            task, s0, layout, provider, config.k_sequences, config.depth_limit, config.branch_limit, transcript_dir
        )
    return LdscAgent(tasks, layout, trees, config, env_config, seed)


def bootstrap_dsc(
    tasks: Sequence[TaskInstruction],
    layout: MazeLayout,
    config: Optional[AgentConfig] = None,
    env_config: Optional[EnvConfig] = None,
    seed: int = 0,
) -> LdscAgent:
    """Skill chaining without decomposition: the only subgoal is the final objective."""
    config = config or AgentConfig()
    env_config = env_config or EnvConfig()
    from .envs import reset

    trees = {}
    for task in tasks:
        s0 = reset(layout, env_config, seed)
        trees[task.task_id] = build_tree(s0, [[task.goal_landmark]], layout, goal_landmark=task.goal_landmark)
    return LdscAgent(tasks, layout, trees, config, env_config, seed)


# --------------------------------------------------------------------------- flat baseline


class FlatDdpgAgent:
    """A single DDPG learner on the environment reward; no options, no subgoals."""

    def __init__(self, layout: MazeLayout, config: AgentConfig, env_config: EnvConfig, seed: int = 0):
        self.layout = layout
        self.config = config
        self.env_config = env_config
        rng = np.random.default_rng(seed)
        noise = LinearSchedule(config.noise_start, config.noise_end, int(config.noise_decay_fraction * config.total_episodes))
        self.state_dim = len(state_features(StateVec(0, 0, 0, 0, 0, (0,) * len(layout.landmarks)), layout))
        self.ddpg = DdpgAgent(
            self.state_dim, 2, env_config.action_bound, config.ddpg_hidden, config.gamma, config.actor_lr,
            config.critic_lr, config.tau, config.batch_size, config.ddpg_capacity, noise,
            np.random.default_rng(rng.integers(2**63)), config.actor_preact_l2,
            (-layout.step_penalty / (1.0 - config.gamma), layout.goal_reward),
        )
        self.repertoire: list = []
        self.episode = 0

    def set_episode(self, episode: int) -> None:
        self.episode = episode
        self.ddpg.schedule_clock = episode

    def run_episode(self, env: MazeEnv, task: TaskInstruction, seed: int, explore: bool = True, train: bool = True) -> EpisodeResult:
        s = env.reset(seed)
        goal_idx = self.layout.landmark_names.index(task.goal_landmark)
        result = EpisodeResult(task.task_id, False, 0, 0.0)
        while not env.done:
            ctx = state_features(s, self.layout)
            a = self.ddpg.act(ctx, explore)
            s2, r, done = env.step(a)
            success = bool(s2.flags[goal_idx])
            if train:
                self.ddpg.push(ctx, a, r, state_features(s2, self.layout), success)
                self.ddpg.maybe_train()
            for i, (f0, f1) in enumerate(zip(s.flags, s2.flags)):
                if f1 and not f0:
                    result.subgoal_times.append((self.layout.landmarks[i].name, env.t))
            result.ret += r
            s = s2
        result.success = bool(s.flags[goal_idx])
        result.steps = env.t
        result.landmarks_attained = int(sum(s.flags))
        return result

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.ddpg.save(directory / "ddpg.json")
        (directory / "manifest.json").write_text(json.dumps({"method": "DDPG", "config": asdict(self.config)}, indent=2))

    def load(self, directory) -> None:
        self.ddpg.load(Path(directory) / "ddpg.json")
