"""Language-guided deep skill chaining on continuous 2D mazes."""

__version__ = "0.1.0"

from .agent import AgentConfig, EpisodeResult, FlatDdpgAgent, LdscAgent, bootstrap, bootstrap_dsc
from .envs import EnvConfig, MazeEnv, MazeLayout, builtin_layout, load_layout, save_layout
from .planning import ProviderMode, build_tree, next_subgoal_candidates, parse_sequences
from .smdp import StateVec, TaskInstruction

__all__ = [
    "AgentConfig",
    "EnvConfig",
    "EpisodeResult",
    "FlatDdpgAgent",
    "LdscAgent",
    "MazeEnv",
    "MazeLayout",
    "ProviderMode",
    "StateVec",
    "TaskInstruction",
    "bootstrap",
    "bootstrap_dsc",
    "build_tree",
    "builtin_layout",
    "load_layout",
    "next_subgoal_candidates",
    "parse_sequences",
    "save_layout",
]
