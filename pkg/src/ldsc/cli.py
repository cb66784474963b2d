"""Command line entry point: ``ldsc <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .envs import LayoutError, builtin_layout, load_layout, reset, save_layout
from .planning import DecompositionError, ProviderError, build_prompt, parse_sequences, query_provider


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldsc", description="Train and evaluate skill-chaining agents on 2D mazes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment from a JSON/TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed-offset", type=int, default=0)

    e = sub.add_parser("eval", help="roll out a saved checkpoint without training")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--explore", action="store_true", help="keep exploration noise on")

    s = sub.add_parser("summarize", help="final-window success table")
    s.add_argument("runs", nargs="+")
    s.add_argument("--window", type=int, default=20)
    s.add_argument("--json", action="store_true")

    pl = sub.add_parser("plot", help="learning curves and option footprints")
    pl.add_argument("runs", nargs="+")
    pl.add_argument("--out")
    pl.add_argument("--window", type=int, default=10)

    f = sub.add_parser("llm-fetch", help="query the configured provider once and write a fixture file")
    f.add_argument("--config", required=True)
    f.add_argument("--out")

    v = sub.add_parser("validate-layout", help="check a layout file")
    v.add_argument("path")

    x = sub.add_parser("export-layout", help="write a builtin layout to a file")
    x.add_argument("name")
    x.add_argument("path")
    return p


def _config_or_exit(path: str) -> harness.ExperimentConfig:
    if not Path(path).exists():
        print(f"error: config file {path} not found", file=sys.stderr)
        raise SystemExit(2)
    try:
        return harness.load_config(path)
    except (harness.ConfigError, ValueError, TypeError) as exc:
        print(f"error: invalid config {path}: {exc}", file=sys.stderr)
        raise SystemExit(2)


def _train(args) -> int:
    cfg = _config_or_exit(args.config)
    run_dir = harness.run_experiment(cfg, args.seed_offset)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    failed = [s for s in manifest["seeds"] if s["status"] != "ok"]
    print(f"run written to {run_dir}")
    for row in harness.summarize([run_dir]) if len(failed) < len(manifest["seeds"]) else []:
        print(row.line())
    for s in failed:
        print(f"seed {s['seed']} failed: {s['error']}", file=sys.stderr)
    return 1 if failed else 0


def _eval(args) -> int:
    results = harness.evaluate_checkpoint(args.checkpoint, args.episodes, args.explore)
    wins = [r for r in results if r.success]
    print(f"episodes {len(results)}  success {len(wins) / len(results):.2f}", end="")
    if wins:
        print(f"  mean steps on success {sum(r.steps for r in wins) / len(wins):.1f}")
    else:
        print()
    return 0


def _summarize(args) -> int:
    rows = harness.summarize(args.runs, args.window)
    if args.json:
        print(json.dumps([r.__dict__ for r in rows], indent=2))
    else:
        for r in rows:
            print(r.line())
    return 0


def _plot(args) -> int:
    for path in harness.plot(args.runs, args.out, args.window):
        print(path)
    return 0


def _llm_fetch(args) -> int:
    cfg = _config_or_exit(args.config)
    layout = cfg.layout()
    task = cfg.task(layout)
    s0 = reset(layout, cfg.env_config, cfg.seeds[0])
    prompt = build_prompt(task, s0, layout, cfg.agent.k_sequences)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"{cfg.name}_provider.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    raw = query_provider(prompt, cfg.provider_mode(), out.parent / "transcripts")
    sequences = parse_sequences(raw, layout)
    out.write_text(json.dumps({str(task.task_id): {"raw": raw, "sequences": sequences}}, indent=2) + "\n")
    print(f"wrote {out}: {sequences}")
    return 0


def _validate_layout(args) -> int:
    layout = load_layout(args.path)
    layout.validate()
    print(f"{args.path}: ok ({len(layout.landmarks)} landmarks, {len(layout.walls)} walls)")
    return 0


def _export_layout(args) -> int:
    save_layout(builtin_layout(args.name), args.path)
    print(f"wrote {args.path}")
    return 0


COMMANDS = {
    "train": _train,
    "eval": _eval,
    "summarize": _summarize,
    "plot": _plot,
    "llm-fetch": _llm_fetch,
    "validate-layout": _validate_layout,
    "export-layout": _export_layout,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SystemExit:
        raise
    except (LayoutError, DecompositionError, ProviderError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
