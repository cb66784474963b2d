import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldsc import harness
from ldsc.harness import (
    METRICS_COLUMNS,
    ConfigError,
    ExperimentConfig,
    load_config,
    moving_average,
    plot,
    preset,
    read_metrics,
    run_experiment,
    save_config,
    summarize,
)


def tiny(tmp_path, method="LDSC", seeds=(0,), episodes=3, name=None, **kw):
    return ExperimentConfig.from_dict(
        {
            "env": "mini_four_rooms",
            "method": method,
            "seeds": list(seeds),
            "episodes": episodes,
            "agent": {"ddpg_hidden": [8, 8], "dqn_hidden": [8], "batch_size": 8},
            "env_config": {"max_episode_steps": 15},
            "output_dir": str(tmp_path),
            "run_name": name,
            "checkpoint_every": 2,
            **kw,
        }
    )


def test_minimal_config_gets_preset_defaults():
    cfg = ExperimentConfig.from_dict({"env": "mini_four_rooms", "method": "DDPG"})
    assert cfg.agent.ddpg_hidden == (64, 64)
    assert cfg.env_config.max_episode_steps == 100
    assert cfg.seeds == [0, 1, 2, 3, 4]
    full = ExperimentConfig.from_dict({"env": "four_rooms", "method": "LDSC"})
    assert full.agent.ddpg_hidden == (400, 300) and full.agent.tau == 0.01 and full.agent.batch_size == 64


def test_config_round_trip(tmp_path):
    cfg = tiny(tmp_path, seeds=(3, 4))
    save_config(cfg, tmp_path / "a.json")
    again = load_config(tmp_path / "a.json")
    save_config(again, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert again.hash() == cfg.hash()


def test_toml_config(tmp_path):
    (tmp_path / "c.toml").write_text('env = "mini_point_maze"\nmethod = "DSC"\nepisodes = 7\n[agent]\nt0 = 50\n')
    cfg = load_config(tmp_path / "c.toml")
    assert (cfg.method.value, cfg.episodes, cfg.agent.t0, cfg.agent.total_episodes) == ("DSC", 7, 50, 7)


@pytest.mark.parametrize(
    "bad",
    [
        {"env": "mini_four_rooms", "seeds": []},
        {"env": "mini_four_rooms", "episodes": 0},
        {"env": "mini_four_rooms", "agent": {"tau": -1}},
        {"env": "mini_four_rooms", "agent": {"gamma": 1.5}},
        {"env": "nowhere"},
        {"env": "mini_four_rooms", "colour": "blue"},
        {"method": "LDSC"},
    ],
)
def test_invalid_configs(bad):
    with pytest.raises((ConfigError, ValueError, TypeError)):
        ExperimentConfig.from_dict(bad)


def test_run_writes_one_csv_per_seed(tmp_path):
    run = run_experiment(tiny(tmp_path, seeds=(0, 1), name="two"))
    for seed in (0, 1):
        rows = read_metrics(run / f"seed_{seed}" / "metrics.csv")
        assert [r["episode"] for r in rows] == [0, 1, 2]
        assert all(r["seed"] == seed and r["steps"] <= 15 for r in rows)
        header = (run / f"seed_{seed}" / "metrics.csv").read_text().splitlines()[0]
        assert header.split(",") == METRICS_COLUMNS
        assert (run / f"seed_{seed}" / "provider.json").exists()
        assert (run / f"seed_{seed}" / "checkpoints" / "ep_00002" / "experiment.json").exists()
        assert (run / f"seed_{seed}" / "checkpoints" / "ep_00003" / "manifest.json").exists()
        assert (run / "trees" / f"seed_{seed}_subgoal_tree.json").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config_hash"] == load_config(run / "config.json").hash()
    assert [s["status"] for s in manifest["seeds"]] == ["ok", "ok"]
    assert len(manifest["provider_transcripts"]) == 2
    assert len(summarize([run])) == 1


def test_rerun_is_identical(tmp_path):
    a = run_experiment(tiny(tmp_path, name="a"))
    b = run_experiment(tiny(tmp_path, name="b"))
    assert (a / "seed_0" / "metrics.csv").read_bytes() == (b / "seed_0" / "metrics.csv").read_bytes()


def test_seed_offset(tmp_path):
    run = run_experiment(tiny(tmp_path, episodes=1, name="off"), seed_offset=10)
    assert (run / "seed_10" / "metrics.csv").exists()


def test_failed_seed_is_recorded(tmp_path, monkeypatch):
    real = harness.build_agent

    def flaky(config, layout, seed, provider=None):
        if seed == 1:
            raise RuntimeError("boom")
        return real(config, layout, seed, provider)

    monkeypatch.setattr(harness, "build_agent", flaky)
    run = run_experiment(tiny(tmp_path, seeds=(0, 1, 2), episodes=1, name="flaky"))
    manifest = json.loads((run / "manifest.json").read_text())
    assert [s["status"] for s in manifest["seeds"]] == ["ok", "failed", "ok"]
    assert "boom" in manifest["seeds"][1]["error"]
    assert manifest["metrics"] == ["seed_0/metrics.csv", "seed_2/metrics.csv"]


@pytest.mark.parametrize("method", ["DSC", "DDPG"])
def test_baseline_runs(tmp_path, method):
    run = run_experiment(tiny(tmp_path, method=method, episodes=2, name=method))
    assert len(read_metrics(run / "seed_0" / "metrics.csv")) == 2
    results = harness.evaluate_checkpoint(run / "seed_0" / "checkpoints" / "ep_00002", 2)
    assert len(results) == 2


def test_evaluate_checkpoint_matches_saved_agent(tmp_path):
    run = run_experiment(tiny(tmp_path, name="ev"))
    ckpt = run / "seed_0" / "checkpoints" / "ep_00003"
    first = harness.evaluate_checkpoint(ckpt, 3)
    second = harness.evaluate_checkpoint(ckpt, 3)
    assert [(r.steps, r.ret) for r in first] == [(r.steps, r.ret) for r in second]
    with pytest.raises(FileNotFoundError):
        harness.evaluate_checkpoint(tmp_path, 1)


def fake_run(root, name, method, per_seed, env="mini_four_rooms"):
    run = root / name
    run.mkdir()
    cfg = ExperimentConfig.from_dict({"env": env, "method": method, "seeds": list(range(len(per_seed)))})
    save_config(cfg, run / "config.json")
    for seed, outcomes in enumerate(per_seed):
        sd = run / f"seed_{seed}"
        sd.mkdir()
        with open(sd / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_COLUMNS)
            for ep, (success, steps, ret) in enumerate(outcomes):
                w.writerow([seed, ep, ret, success, steps, 2, success * 2, success * 2])
    return run


def test_summary_examples(tmp_path):
    always = fake_run(tmp_path, "always", "LDSC", [[(1, 10, 1.0)] * 4] * 2)
    [row] = summarize([always], window=4)
    assert row.success_mean == 1.0 and row.success_sd == 0.0 and row.steps_on_success == 10
    assert row.reference == (95.0, 2.0, 678, 208)
    mixed = fake_run(tmp_path, "mixed", "DSC", [[(1, 5, 1.0), (1, 7, 1.0), (0, 100, -1.0), (1, 9, 1.0)]])
    [row] = summarize([mixed], window=4)
    assert row.success_mean == pytest.approx(0.75)
    assert row.steps_on_success == pytest.approx(7.0)
    assert "75.0%" in row.line()


@given(st.lists(st.lists(st.tuples(st.integers(0, 1), st.integers(1, 100)), min_size=1, max_size=30), min_size=1, max_size=4), st.integers(1, 25))
def test_summary_matches_brute_force(tmp_path_factory, seeds, window):
    root = tmp_path_factory.mktemp("runs")
    run = fake_run(root, "r", "LDSC", [[(s, n, float(s)) for s, n in outcomes] for outcomes in seeds])
    [row] = summarize([run], window)
    per_seed, steps = [], []
    for outcomes in seeds:
        tail = outcomes[len(outcomes) - min(window, len(outcomes)):]
        per_seed.append(sum(s for s, _ in tail) / len(tail))
        steps += [n for s, n in tail if s]
    mean = sum(per_seed) / len(per_seed)
    sd = (sum((p - mean) ** 2 for p in per_seed) / len(per_seed)) ** 0.5
    assert row.success_mean == pytest.approx(mean)
    assert row.success_sd == pytest.approx(sd, abs=1e-12)
    if steps:
        assert row.steps_on_success == pytest.approx(sum(steps) / len(steps))
    else:
        assert np.isnan(row.steps_on_success)


def test_summarize_errors(tmp_path):
    with pytest.raises(ValueError):
        summarize([])
    empty = fake_run(tmp_path, "empty", "LDSC", [[]])
    with pytest.raises(ValueError):
        summarize([empty])


def test_moving_average_examples():
    assert np.allclose(moving_average([1.0] * 25, 10), 1.0)
    impulse = np.zeros(50)
    impulse[20] = 1.0
    smooth = moving_average(impulse, 10)
    assert np.allclose(smooth[20:30], 0.1)
    assert np.allclose(smooth[:20], 0.0) and np.allclose(smooth[30:], 0.0)
    with pytest.raises(ValueError):
        moving_average([1.0], 0)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=60), st.integers(1, 15))
def test_moving_average_brute_force(values, window):
    smooth = moving_average(values, window)
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1) : i + 1]
        assert smooth[i] == pytest.approx(sum(chunk) / len(chunk), abs=1e-9)


def test_plot_outputs(tmp_path):
    run = fake_run(tmp_path, "p", "LDSC", [[(1, 10, 1.0)] * 12])
    trees = run / "trees"
    trees.mkdir()
    nodes = [
        {"id": 0, "kind": "GLOBAL", "subgoal": "key", "box": None, "trained": True, "budget": 1, "depth": 0},
        {"id": 1, "kind": "GOAL", "subgoal": "key", "box": {"lo": [7, 6], "hi": [9, 9]}, "trained": True, "budget": 100, "depth": 0},
        {"id": 2, "kind": "CHAIN", "subgoal": "key", "box": {"lo": [7, 1], "hi": [9, 6]}, "trained": True, "budget": 100, "depth": 1},
        {"id": 3, "kind": "CHAIN", "subgoal": "key", "box": None, "trained": False, "budget": 100, "depth": 2},
    ]
    (trees / "seed_0_option_tree.json").write_text(json.dumps({"nodes": nodes, "edges": [[1, 2], [2, 3]]}))
    written = plot([run], tmp_path / "out")
    names = sorted(p.name for p in written)
    assert any(n.endswith("learning_curve.svg") for n in names)
    rows = list(csv.DictReader(open(tmp_path / "out" / "mini_four_rooms_ldsc_seed_0_footprint.csv")))
    assert [int(r["option_id"]) for r in rows] == [1, 2]
    curve = list(csv.DictReader(open(tmp_path / "out" / "mini_four_rooms_ldsc_learning_curve.csv")))
    assert all(float(r["smoothed_return"]) == 1.0 for r in curve)


def test_preset_for_every_mini_map():
    for env in ("mini_four_rooms", "mini_point_maze", "mini_e_maze", "mini_tunnel"):
        cfg = preset(env, "LDSC")
        assert cfg.layout().name == env
        assert cfg.provider_mode().env == env


def test_shipped_configs_load():
    from pathlib import Path

    configs = sorted((Path(__file__).parent.parent / "scripts" / "configs").glob("*.toml"))
    assert len(configs) >= 12
    names = set()
    for path in configs:
        cfg = load_config(path)
        names.add(cfg.name)
    assert len(names) == len(configs)
