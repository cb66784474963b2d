"""Experiment configuration, training runs, metrics files, summaries and plots.

Run directory layout::

    <run_dir>/config.json
    <run_dir>/manifest.json
    <run_dir>/seed_<n>/metrics.csv       deterministic columns only
    <run_dir>/seed_<n>/timing.csv        wall-clock per episode
    <run_dir>/seed_<n>/provider.json     decomposition fixture for offline re-runs
    <run_dir>/seed_<n>/checkpoints/ep_<k>/
    <run_dir>/trees/seed_<n>_{subgoal,option}_tree.json
    <run_dir>/transcripts/seed_<n>/
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .agent import AgentConfig, FlatDdpgAgent, LdscAgent, bootstrap, bootstrap_dsc
from .envs import EnvConfig, MazeEnv, MazeLayout, builtin_layout, load_layout, reset
from .planning import (
    DEFAULT_TASK_TEXT,
    ProviderKind,
    ProviderMode,
    base_env_name,
    build_prompt,
    query_provider,
)
from .smdp import TaskInstruction

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["seed", "episode", "return", "success", "steps", "repertoire", "subgoals_attained", "landmarks"]
TIMING_COLUMNS = ["seed", "episode", "wall_ms"]

# published results for the full-scale maps: success % (mean, sd), completion seconds (mean, sd)
REFERENCE_RESULTS = {
    ("DSC", "point_maze"): (0.0, 0.0, 1063, 274),
    ("DDPG", "point_maze"): (0.0, 0.0, 1187, 116),
    ("LDSC", "point_maze"): (100.0, 0.0, 485, 174),
    ("DSC", "four_rooms"): (86.0, 8.0, 1035, 479),
    ("DDPG", "four_rooms"): (0.0, 0.0, 1331, 355),
    ("LDSC", "four_rooms"): (95.0, 2.0, 678, 208),
    ("DSC", "e_maze"): (0.0, 0.0, 1345, 145),
    ("DDPG", "e_maze"): (0.0, 0.0, 1344, 83),
    ("LDSC", "e_maze"): (100.0, 0.0, 86.5, 12.5),
    ("DSC", "tunnel"): (0.0, 0.0, 1368, 370),
    ("DDPG", "tunnel"): (0.0, 0.0, 1527, 527),
    ("LDSC", "tunnel"): (81.8, 3.6, 906, 306),
}


class Method(str, enum.Enum):
    LDSC = "LDSC"
    DSC = "DSC"
    DDPG = "DDPG"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "mini_four_rooms"
    method: Method = Method.LDSC
    seeds: list[int] = field(default_factory=lambda: [0])
    episodes: int = 300
    layout_path: Optional[str] = None
    task_text: Optional[str] = None
    provider: Optional[dict] = None
    agent: AgentConfig = field(default_factory=AgentConfig)
    env_config: EnvConfig = field(default_factory=EnvConfig)
    output_dir: str = "runs"
    run_name: Optional[str] = None
    checkpoint_every: int = 100

    def __post_init__(self):
        self.method = Method(self.method)
        self.seeds = [int(s) for s in self.seeds]
        if isinstance(self.agent, dict):
            self.agent = AgentConfig(**self.agent)
        if isinstance(self.env_config, dict):
            self.env_config = EnvConfig(**self.env_config)
        # the schedules are stretched over the run length
        self.agent.total_episodes = self.episodes
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: duplicates")
        if self.episodes < 1:
            raise ConfigError("episodes: must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every: must be >= 1")
        a = self.agent
        positive = ["batch_size", "tau", "actor_lr", "critic_lr", "dqn_lr", "t0", "global_budget",
                    "gestation_threshold", "k_seg", "dqn_capacity", "ddpg_capacity", "k_sequences",
                    "depth_limit", "branch_limit", "noise_start", "epsilon_start"]
        for name in positive:
            if not getattr(a, name) > 0:
                raise ConfigError(f"agent.{name}: must be positive")
        if not 0.0 < a.gamma <= 1.0:
            raise ConfigError("agent.gamma: must lie in (0, 1]")
        if a.margin < 0 or a.max_chain_depth < 0:
            raise ConfigError("agent.margin / agent.max_chain_depth: must be >= 0")
        if a.noise_end < 0 or not 0 <= a.epsilon_end <= a.epsilon_start <= 1:
            raise ConfigError("agent.epsilon/noise schedule out of range")
        if any(h < 1 for h in a.ddpg_hidden + a.dqn_hidden):
            raise ConfigError("agent hidden sizes: must be >= 1")
        if self.layout_path is None:
            try:
                builtin_layout(self.env)
            except Exception as exc:
                raise ConfigError(f"env: {exc}") from None

    # ---- derived objects

    def layout(self) -> MazeLayout:
        return load_layout(self.layout_path) if self.layout_path else builtin_layout(self.env)

    def task(self, layout: Optional[MazeLayout] = None) -> TaskInstruction:
        layout = layout or self.layout()
        text = self.task_text or DEFAULT_TASK_TEXT.get(base_env_name(self.env), f"Reach the {layout.goal_landmark}.")
        return TaskInstruction(0, text, layout.goal_landmark)

    def provider_mode(self) -> ProviderMode:
        data = dict(self.provider or {"mode": "SCRIPTED"})
        if data.get("mode", "SCRIPTED") == "SCRIPTED":
            data.setdefault("env", self.env)
        return ProviderMode.from_dict(data)

    @property
    def name(self) -> str:
        return self.run_name or f"{self.env}_{self.method.value.lower()}"

    # ---- serialization

    def to_dict(self) -> dict:
        env_cfg = asdict(self.env_config)
        env_cfg["dynamics_mode"] = self.env_config.dynamics_mode.value
        agent = asdict(self.agent)
        agent["ddpg_hidden"] = list(agent["ddpg_hidden"])
        agent["dqn_hidden"] = list(agent["dqn_hidden"])
        return {
            "env": self.env,
            "method": self.method.value,
            "seeds": list(self.seeds),
            "episodes": self.episodes,
            "layout_path": self.layout_path,
            "task_text": self.task_text,
            "provider": self.provider,
            "agent": agent,
            "env_config": env_cfg,
            "output_dir": self.output_dir,
            "run_name": self.run_name,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "env" not in data and "layout_path" not in data:
            raise ConfigError("env: missing")
        data = dict(data)
        # a minimal config names only env + method; mini maps get the desk-scale preset underneath
        base = preset(data.get("env", "mini_four_rooms"), data.get("method", "LDSC")).to_dict()
        if "agent" in data:
            base["agent"].update(data.pop("agent"))
        if "env_config" in data:
            base["env_config"].update(data.pop("env_config"))
        base.update(data)
        return cls(**base)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


MINI_EPISODE_STEPS = {"four_rooms": 100, "point_maze": 150, "e_maze": 150, "tunnel": 200}


def preset(env: str, method: str | Method = Method.LDSC, **overrides) -> ExperimentConfig:
    """Defaults for ``env``: mini maps get small networks and short episodes."""
    agent = AgentConfig()
    env_config = EnvConfig()
    if env.startswith("mini_"):
        agent = AgentConfig(ddpg_hidden=(64, 64))
        env_config = EnvConfig(max_episode_steps=MINI_EPISODE_STEPS.get(base_env_name(env), 150))
    cfg = ExperimentConfig(env=env, method=Method(method), agent=agent, env_config=env_config, seeds=[0, 1, 2, 3, 4])
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.__post_init__()
    return cfg


# --------------------------------------------------------------------------- running


def _fetch_decomposition(config: ExperimentConfig, layout: MazeLayout, seed: int, seed_dir: Path, transcripts: Path) -> ProviderMode:
    """Query the configured provider once and pin the answer in a fixture file."""
    task = config.task(layout)
    s0 = reset(layout, config.env_config, seed)
    prompt = build_prompt(task, s0, layout, config.agent.k_sequences)
    raw = query_provider(prompt, config.provider_mode(), transcripts)
    fixture = seed_dir / "provider.json"
    fixture.write_text(json.dumps({str(task.task_id): {"raw": raw}}, indent=2) + "\n")
    return ProviderMode(ProviderKind.FIXTURE, path=str(fixture))


def build_agent(config: ExperimentConfig, layout: MazeLayout, seed: int, provider: Optional[ProviderMode] = None):
    task = config.task(layout)
    if config.method is Method.LDSC:
        return bootstrap([task], layout, provider or config.provider_mode(), config.agent, config.env_config, seed)
    if config.method is Method.DSC:
        return bootstrap_dsc([task], layout, config.agent, config.env_config, seed)
    return FlatDdpgAgent(layout, config.agent, config.env_config, seed)


def episode_seed(seed: int, episode: int) -> int:
    return seed * 100_000 + episode


def _metrics_row(seed: int, episode: int, result) -> list:
    return [
        seed,
        episode,
        repr(round(result.ret, 10)),
        int(result.success),
        result.steps,
        result.repertoire_size,
        len(result.subgoal_times),
        result.landmarks_attained,
    ]


def _save_trees(agent, trees_dir: Path, seed: int) -> None:
    if isinstance(agent, LdscAgent):
        subgoal = {str(tid): t.snapshot() for tid, t in agent.trees.items()}
        (trees_dir / f"seed_{seed}_subgoal_tree.json").write_text(json.dumps(subgoal, indent=2))
        (trees_dir / f"seed_{seed}_option_tree.json").write_text(json.dumps(agent.tree.snapshot(), indent=2))


def _checkpoint(agent, config: ExperimentConfig, seed: int, episode: int, seed_dir: Path, provider: Optional[ProviderMode]) -> None:
    ckpt = seed_dir / "checkpoints" / f"ep_{episode:05d}"
    agent.save(ckpt)
    info = {"config": config.to_dict(), "seed": seed, "episode": episode,
            "provider": provider.to_dict() if provider else None}
    (ckpt / "experiment.json").write_text(json.dumps(info, indent=2))


def run_seed(config: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    layout = config.layout()
    seed_dir = run_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    trees_dir = run_dir / "trees"
    trees_dir.mkdir(exist_ok=True)
    provider = None
    if config.method is Method.LDSC:
        provider = _fetch_decomposition(config, layout, seed, seed_dir, run_dir / "transcripts" / f"seed_{seed}")
    agent = build_agent(config, layout, seed, provider)
    env = MazeEnv(layout, config.env_config)
    task = config.task(layout)
    with open(seed_dir / "metrics.csv", "w", newline="") as mf, open(seed_dir / "timing.csv", "w", newline="") as tf:
        metrics, timing = csv.writer(mf), csv.writer(tf)
        metrics.writerow(METRICS_COLUMNS)
        timing.writerow(TIMING_COLUMNS)
        for ep in range(config.episodes):
            agent.set_episode(ep)
            t0 = time.perf_counter()
            result = agent.run_episode(env, task, episode_seed(seed, ep))
            timing.writerow([seed, ep, f"{1000 * (time.perf_counter() - t0):.3f}"])
            metrics.writerow(_metrics_row(seed, ep, result))
            mf.flush()
            if (ep + 1) % config.checkpoint_every == 0 or ep + 1 == config.episodes:
                _checkpoint(agent, config, seed, ep + 1, seed_dir, provider)
    _save_trees(agent, trees_dir, seed)
    return {"seed": seed, "status": "ok"}


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    from . import __version__

    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*")):
        if path.suffix in (".py", ".json") and "__pycache__" not in path.parts:
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


def run_experiment(config: ExperimentConfig, seed_offset: int = 0) -> Path:
    """Train every seed and write the run directory; a failing seed is recorded and skipped."""
    if seed_offset:
        config = ExperimentConfig.from_dict({**config.to_dict(), "seeds": [s + seed_offset for s in config.seeds]})
    run_dir = Path(config.output_dir) / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    statuses = []
    for seed in config.seeds:
        try:
            statuses.append(run_seed(config, seed, run_dir))
        except Exception as exc:  # keep going with the other seeds
            log.error("seed %d failed: %s", seed, exc)
            statuses.append({"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                             "traceback": traceback.format_exc()})
    transcripts = sorted(str(p.relative_to(run_dir)) for p in (run_dir / "transcripts").rglob("*.json")) \
        if (run_dir / "transcripts").exists() else []
    manifest = {
        "config_hash": config.hash(),
        "code_version": code_version(),
        "method": config.method.value,
        "env": config.env,
        "seeds": statuses,
        "provider_transcripts": transcripts,
        "metrics": [f"seed_{s['seed']}/metrics.csv" for s in statuses if s["status"] == "ok"],
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return run_dir


def evaluate_checkpoint(checkpoint, episodes: int, explore: bool = False) -> list:
    """Roll out a saved agent without training."""
    checkpoint = Path(checkpoint)
    info_path = checkpoint / "experiment.json"
    if not info_path.exists():
        raise FileNotFoundError(f"{checkpoint} is not a checkpoint directory (no experiment.json)")
    info = json.loads(info_path.read_text())
    config = ExperimentConfig.from_dict(info["config"])
    layout = config.layout()
    provider = ProviderMode.from_dict(info["provider"]) if info.get("provider") else None
    agent = build_agent(config, layout, info["seed"], provider)
    agent.load(checkpoint)
    agent.set_episode(config.episodes)
    env = MazeEnv(layout, config.env_config)
    task = config.task(layout)
    return [agent.run_episode(env, task, episode_seed(info["seed"], config.episodes + k), explore, False)
            for k in range(episodes)]


# --------------------------------------------------------------------------- summaries


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in ("seed", "episode", "success", "steps", "repertoire", "subgoals_attained", "landmarks"):
            r[k] = int(r[k])
        r["return"] = float(r["return"])
    return rows


def _read_timing(path) -> dict[int, float]:
    if not Path(path).exists():
        return {}
    with open(path, newline="") as f:
        return {int(r["episode"]): float(r["wall_ms"]) for r in csv.DictReader(f)}


@dataclass
class SummaryRow:
    method: str
    env: str
    seeds: int
    success_mean: float
    success_sd: float
    steps_on_success: float
    wall_ms_on_success: float
    landmarks_mean: float
    reference: Optional[tuple] = None

    def line(self) -> str:
        ref = ""
        if self.reference:
            ref = f"  (reference {self.reference[0]:g}% ± {self.reference[1]:g}%, {self.reference[2]:g} ± {self.reference[3]:g} s)"
        steps = "n/a" if math.isnan(self.steps_on_success) else f"{self.steps_on_success:.1f}"
        return (f"{self.method:5s} {self.env:18s} success {100 * self.success_mean:5.1f}% ± {100 * self.success_sd:4.1f}%"
                f"  steps {steps}  landmarks {self.landmarks_mean:.2f}  seeds {self.seeds}{ref}")


def _seed_dirs(run_dir: Path) -> list[Path]:
    return sorted((p for p in run_dir.glob("seed_*") if (p / "metrics.csv").exists()),
                  key=lambda p: int(p.name.split("_")[1]))


def summarize(run_dirs: Sequence, window: int = 20) -> list[SummaryRow]:
    """Final-window success per seed, averaged over seeds, grouped by (method, env)."""
    if not run_dirs:
        raise ValueError("no run directories given")
    groups: dict[tuple[str, str], dict] = {}
    for rd in map(Path, run_dirs):
        cfg = json.loads((rd / "config.json").read_text())
        key = (cfg["method"], cfg["env"])
        g = groups.setdefault(key, {"success": [], "steps": [], "wall": [], "landmarks": []})
        for sd in _seed_dirs(rd):
            rows = read_metrics(sd / "metrics.csv")[-window:]
            if not rows:
                raise ValueError(f"empty metrics window in {sd}")
            timing = _read_timing(sd / "timing.csv")
            g["success"].append(float(np.mean([r["success"] for r in rows])))
            g["landmarks"].append(float(np.mean([r["landmarks"] for r in rows])))
            g["steps"].extend(r["steps"] for r in rows if r["success"])
            g["wall"].extend(timing[r["episode"]] for r in rows if r["success"] and r["episode"] in timing)
    out = []
    for (method, env), g in sorted(groups.items()):
        if not g["success"]:
            raise ValueError(f"no metrics found for {method} on {env}")
        out.append(
            SummaryRow(
                method,
                env,
                len(g["success"]),
                float(np.mean(g["success"])),
                float(np.std(g["success"])),
                float(np.mean(g["steps"])) if g["steps"] else math.nan,
                float(np.mean(g["wall"])) if g["wall"] else math.nan,
                float(np.mean(g["landmarks"])),
                REFERENCE_RESULTS.get((method, base_env_name(env))),
            )
        )
    return out


# --------------------------------------------------------------------------- plots


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing mean; the first entries average over what is available."""
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def plot(run_dirs: Sequence, out_dir=None, window: int = 10) -> list[Path]:
    """Learning curves and option footprints as CSV plus SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    written: list[Path] = []
    for rd in map(Path, run_dirs):
        dest = Path(out_dir) if out_dir else rd / "plots"
        dest.mkdir(parents=True, exist_ok=True)
        cfg = ExperimentConfig.from_dict(json.loads((rd / "config.json").read_text()))
        tag = cfg.name

        curve_csv = dest / f"{tag}_learning_curve.csv"
        fig, ax = plt.subplots(figsize=(6, 4))
        with open(curve_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "episode", "return", "smoothed_return"])
            for sd in _seed_dirs(rd):
                rows = read_metrics(sd / "metrics.csv")
                smooth = moving_average([r["return"] for r in rows], window)
                for r, s in zip(rows, smooth):
                    w.writerow([r["seed"], r["episode"], r["return"], repr(round(float(s), 10))])
                ax.plot([r["episode"] for r in rows], smooth, label=sd.name)
        ax.set_xlabel("episode")
        ax.set_ylabel(f"return (moving average, {window})")
        ax.set_title(tag)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(dest / f"{tag}_learning_curve.svg")
        plt.close(fig)
        written += [curve_csv, dest / f"{tag}_learning_curve.svg"]

        layout = cfg.layout()
        for tree_file in sorted((rd / "trees").glob("seed_*_option_tree.json")):
            seed = tree_file.name.split("_")[1]
            snap = json.loads(tree_file.read_text())
            boxes = [n for n in snap["nodes"] if n["box"] is not None]
            fp_csv = dest / f"{tag}_seed_{seed}_footprint.csv"
            with open(fp_csv, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["option_id", "kind", "subgoal", "depth", "x_lo", "y_lo", "x_hi", "y_hi"])
                for n in boxes:
                    w.writerow([n["id"], n["kind"], n["subgoal"], n["depth"], *n["box"]["lo"], *n["box"]["hi"]])
            fig, ax = plt.subplots(figsize=(5, 5))
            for (x0, y0), (x1, y1) in layout.walls:
                ax.plot([x0, x1], [y0, y1], color="black", lw=2)
            for lm in layout.landmarks:
                ax.add_patch(plt.Circle(lm.region_center, lm.region_radius, color="tab:red", alpha=0.4))
                ax.annotate(lm.name, lm.region_center, ha="center", fontsize=8)
            for n in boxes:
                (xl, yl), (xh, yh) = n["box"]["lo"], n["box"]["hi"]
                ax.add_patch(Rectangle((xl, yl), xh - xl, yh - yl, fill=False, lw=1.2))
                ax.annotate(f"o{n['id']}", (xl, yh), fontsize=7)
            bx0, by0, bx1, by1 = layout.bounds
            ax.set_xlim(bx0, bx1)
            ax.set_ylim(by0, by1)
            ax.set_aspect("equal")
            ax.set_title(f"{tag} seed {seed}: initiation sets")
            fig.savefig(dest / f"{tag}_seed_{seed}_footprint.svg")
            plt.close(fig)
            written += [fp_csv, dest / f"{tag}_seed_{seed}_footprint.svg"]
    return written
