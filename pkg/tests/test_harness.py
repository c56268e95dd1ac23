"""Harness and config: aggregation, sweep determinism, CLI, artifacts."""

import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from uavsim.baselines import (
    avoidance_observation,
    sample_intruders,
    start_ownship,
    train_avoidance_dqn,
)
from uavsim.cli import main as cli_main
from uavsim.config import (
    AvoidDqnConfig,
    ConfigError,
    D3QNConfig,
    ExperimentConfig,
    ScenarioConfig,
    SearchProfileConfig,
    SweepConfig,
    config_hash,
    experiment_from_dict,
    load_config,
)
from uavsim.harness import (
    EpisodeRow,
    aggregate,
    convergence_episode,
    dqn_avoid_baseline,
    episode_intruders,
    goal_digest,
    run_cell,
    run_pipeline,
    run_stage1,
    read_curve_csv,
)
from uavsim.trace import validate_trace
from uavsim.world import TerminalKind

TINY = ExperimentConfig(
    scenario=ScenarioConfig(num_users=2),
    d3qn=D3QNConfig(episodes=3, steps_per_episode=8, batch_size=8,
                    buffer_capacity=100, norm_warmup_steps=16),
    profiles={"tree-depth": SearchProfileConfig(simulations=80, search_depth=3),
              "tree-fast": SearchProfileConfig(simulations=40, search_depth=2)},
    avoid_dqn=AvoidDqnConfig(train_intruders=3, episodes=4),
    sweep=SweepConfig(intruder_counts=(3,), episodes_per_cell=4, seeds=(1,)),
    seed=9,
)


def rows_for(profile, outcomes, steps=None):
    steps = steps or [10] * len(outcomes)
    reward = {"goal": 1.0, "timeout": 0.1, "collision": 0.0}
    return [
        EpisodeRow(profile, 5, 1, i, k, s, reward[k])
        for i, (k, s) in enumerate(zip(outcomes, steps))
    ]


def test_aggregate_counts_and_rates():
    rows = rows_for("tree-depth", ["goal", "goal", "collision", "timeout"],
                    [10, 20, 5, 50])
    table = aggregate(rows)
    assert len(table) == 1
    r = table[0]
    assert r.goal_rate == pytest.approx(0.5)
    assert r.collision_rate == pytest.approx(0.25)
    assert r.timeout_rate == pytest.approx(0.25)
    assert r.goal_rate + r.collision_rate + r.timeout_rate == pytest.approx(1.0, abs=1e-9)
    assert r.mean_steps == pytest.approx((10 + 20 + 5 + 50) / 4)
    assert r.mean_steps_goal == pytest.approx(15.0)
    # hand-computed mean terminal reward
    assert r.mean_return == pytest.approx((1.0 + 1.0 + 0.0 + 0.1) / 4)


def test_aggregate_order_independent_and_single_episode():
    rows = rows_for("a", ["goal"]) + rows_for("b", ["collision"])
    t1 = aggregate(rows)
    t2 = aggregate(list(reversed(rows)))
    assert t1 == t2
    assert {r.goal_rate for r in t1} == {0.0, 1.0}
    with pytest.raises(ValueError):
        aggregate([])


def test_convergence_episode_sustained():
    # noisy spike at episode 30 must not count as convergence
    rets = np.concatenate([
        np.full(30, 10.0), [100.0], np.full(129, 20.0), np.full(140, 100.0)])
    ep = convergence_episode(rets)
    assert 150 <= ep <= 170
    flat = np.full(100, 42.0)
    assert convergence_episode(flat) == 9
    with pytest.raises(ValueError):
        convergence_episode([1.0, 2.0])


def test_episode_intruders_paired_across_profiles():
    a = episode_intruders(TINY, 1, 3, 0)
    b = episode_intruders(TINY, 1, 3, 0)
    assert a == b
    c = episode_intruders(TINY, 1, 3, 1)
    assert a != c


def test_sample_intruders_respects_clearance():
    rng = np.random.default_rng(0)
    scenario = TINY.scenario
    for _ in range(20):
        intruders = sample_intruders(rng, 5, scenario)
        assert len(intruders) == 5
        sx, sy = scenario.own_start_xy
        for it in intruders:
            assert math.hypot(it.x - sx, it.y - sy) >= scenario.spawn_clearance
            assert scenario.planning_bounds.contains_xy(it.x, it.y)


def test_avoidance_observation_padding_and_truncation():
    scenario = TINY.scenario
    own = start_ownship(scenario, (1000.0, 1000.0))
    rng = np.random.default_rng(1)
    intruders = sample_intruders(rng, 5, scenario)
    obs = avoidance_observation(own, intruders, (1000.0, 1000.0), 3, scenario)
    assert obs.shape == (6 + 4 * 3,)
    # fewer intruders than slots: trailing slots zero-padded
    obs_pad = avoidance_observation(own, intruders[:1], (1000.0, 1000.0), 3, scenario)
    assert np.all(obs_pad[10:] == 0.0)
    # truncation keeps the nearest ones
    near = min(intruders, key=lambda it: (it.x - own.x) ** 2 + (it.y - own.y) ** 2)
    obs_trunc = avoidance_observation(own, intruders, (1000.0, 1000.0), 1, scenario)
    assert obs_trunc[6] == pytest.approx((near.x - own.x) / scenario.planning_bounds.diagonal)


def test_run_cell_deterministic_and_traced(tmp_path):
    goal = (1000.0, 1000.0)
    t1 = tmp_path / "a.jsonl"
    t2 = tmp_path / "b.jsonl"
    rows1 = run_cell(TINY, "tree-fast", 3, 1, goal, str(t1), "r", "h")
    rows2 = run_cell(TINY, "tree-fast", 3, 1, goal, str(t2), "r", "h")
    assert rows1 == rows2
    assert t1.read_text().splitlines()[1:] == t2.read_text().splitlines()[1:]
    report = validate_trace(t1)
    assert report.ok
    # one record per decision step
    assert report.checked == sum(r.steps for r in rows1)


def test_dqn_avoid_baseline_flies_to_terminal():
    scenario = TINY.scenario
    goal = (1000.0, 1000.0)
    net, stats = train_avoidance_dqn(scenario, goal, TINY.avoid_dqn, seed=4)
    assert stats.goal_rate + stats.collision_rate + stats.timeout_rate == pytest.approx(1.0)
    intruders = episode_intruders(TINY, 1, 3, 0)
    start = start_ownship(scenario, goal)
    result = dqn_avoid_baseline(net, start, goal, intruders, TINY,
                                np.random.default_rng(0))
    assert result.kind in (TerminalKind.GOAL, TerminalKind.COLLISION,
                           TerminalKind.TIMEOUT)
    assert result.steps <= scenario.s_max


def test_no_threat_sweep_cell_always_reaches_goal():
    # zero intruders at the full deep profile: every episode must end at goal
    cfg = ExperimentConfig(
        scenario=TINY.scenario,
        sweep=SweepConfig(intruder_counts=(0,), episodes_per_cell=100, seeds=(1,)),
        seed=9)
    rows = run_cell(cfg, "tree-depth", 0, 1, (1000.0, 1000.0))
    table = aggregate(rows)[0]
    assert table.goal_rate == 1.0


def test_run_cell_requires_weights_for_dqn_avoid():
    with pytest.raises(ValueError, match="avoidance weights"):
        run_cell(TINY, "dqn-avoid", 3, 1, (1000.0, 1000.0))
    with pytest.raises(ValueError, match="unknown profile"):
        run_cell(TINY, "astar", 3, 1, (1000.0, 1000.0))


def test_run_pipeline_artifacts(tmp_path):
    result = run_pipeline(TINY, tmp_path, {})
    files = {p.name for p in Path(tmp_path).iterdir()}
    assert "metrics.csv" in files and "episodes.csv" in files
    assert "run_manifest.json" in files
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["goal_hash_stage1"] == manifest["goal_hash_stage2"]
    assert manifest["goal_hash_stage1"] == goal_digest(manifest["goal_xy"])
    # sweep grid in outputs matches the config exactly
    profiles = {r.profile for r in result["metrics"]}
    assert profiles == set(TINY.sweep.profiles)
    counts = {r.intruders for r in result["metrics"]}
    assert counts == set(TINY.sweep.intruder_counts)
    for row in result["metrics"]:
        assert row.goal_rate + row.collision_rate + row.timeout_rate == pytest.approx(1.0, abs=1e-9)
    curve = read_curve_csv(result["stage1"].curve_path)
    assert len(curve) == TINY.d3qn.episodes


def test_stage1_random_agent(tmp_path):
    stage1 = run_stage1(TINY, tmp_path, {}, agent="random", seed=3)
    assert stage1.checkpoint_path is None
    assert Path(stage1.curve_path).exists()
    curve = read_curve_csv(stage1.curve_path)
    assert all(p["epsilon"] == 1.0 for p in curve)


# --- config parsing -----------------------------------------------------------


def test_config_yaml_roundtrip(tmp_path):
    doc = {
        "seed": 3,
        "agent": "dqn",
        "scenario": {
            "num_users": 3,
            "channel": {"bandwidth_hz": 2.0e6, "fading_mode": "rayleigh"},
            "ownship": {"v_min": 25.0, "tilt_max_deg": 20.0},
            "service_bounds": {"x_min": 0.0, "x_max": 400.0, "y_min": 0.0,
                               "y_max": 400.0, "h_min": 90.0, "h_max": 200.0},
        },
        "d3qn": {"episodes": 12, "target_mode": "vanilla"},
        "profiles": {"tree-depth": {"simulations": 99, "search_depth": 2}},
        "sweep": {"intruder_counts": [2, 4], "seeds": [7], "episodes_per_cell": 5},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    cfg, raw = load_config(path)
    assert cfg.seed == 3 and cfg.agent == "dqn"
    assert cfg.scenario.num_users == 3
    assert cfg.scenario.channel.bandwidth_hz == 2.0e6
    assert cfg.scenario.ownship_limits.v_min == 25.0
    assert cfg.scenario.ownship_limits.tilt_max == pytest.approx(math.radians(20.0))
    assert cfg.d3qn.target_mode == "vanilla"
    assert cfg.profiles["tree-depth"].simulations == 99
    assert cfg.profiles["tree-fast"].simulations == 200  # default retained
    assert cfg.sweep.intruder_counts == (2, 4)
    assert config_hash(raw) == config_hash(json.loads(json.dumps(raw)))


@pytest.mark.parametrize("doc,fragment", [
    ({"unknown_section": {}}, "unknown keys"),
    ({"scenario": {"num_users": 0}}, "num_users"),
    ({"scenario": {"typo_key": 1}}, "unknown keys"),
    ({"d3qn": {"target_mode": "triple"}}, "target_mode"),
    ({"sweep": {"seeds": []}}, "seed"),
    ({"sweep": {"profiles": ["no-such-profile"]}}, "undefined profile"),
    ({"agent": "sarsa"}, "agent"),
    ({"scenario": {"service_bounds": {"x_min": 9.0, "x_max": 1.0,
                                      "y_min": 0.0, "y_max": 1.0}}}, "bounds"),
])
def test_config_rejects_bad_input(doc, fragment):
    with pytest.raises(ConfigError) as err:
        experiment_from_dict(doc)
    assert fragment in str(err.value)


def test_config_coerces_yaml_string_floats(tmp_path):
    # pyyaml reads exponents without a sign (2.0e9) as strings
    path = tmp_path / "cfg.yaml"
    path.write_text(
        "scenario:\n"
        "  channel: {carrier_freq_hz: 2.0e9, noise_power_w: 1.0e-13}\n"
        "  s_max: 150.0\n"
        "d3qn: {learning_rate: 1.0e-3}\n")
    cfg, _ = load_config(path)
    assert cfg.scenario.channel.carrier_freq_hz == 2.0e9
    assert cfg.scenario.s_max == 150
    assert cfg.d3qn.learning_rate == 1.0e-3


def test_default_config_is_valid():
    cfg = experiment_from_dict({})
    assert cfg.scenario.num_users == 4
    assert cfg.profiles["tree-depth"].search_depth == 4
    assert cfg.profiles["tree-depth"].exploration_c == pytest.approx(1 / math.sqrt(2))


# --- CLI ------------------------------------------------------------------------


def write_tiny_config(path):
    doc = {
        "seed": 9,
        "scenario": {"num_users": 2},
        "d3qn": {"episodes": 3, "steps_per_episode": 8, "batch_size": 8,
                 "buffer_capacity": 100, "norm_warmup_steps": 16},
        "profiles": {"tree-depth": {"simulations": 80, "search_depth": 3},
                     "tree-fast": {"simulations": 40, "search_depth": 2}},
        "avoid_dqn": {"train_intruders": 3, "episodes": 4},
        "sweep": {"intruder_counts": [3], "episodes_per_cell": 4, "seeds": [1]},
    }
    Path(path).write_text(yaml.safe_dump(doc))


def test_cli_train_plan_explain_validate(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.yaml"
    write_tiny_config(cfg_path)

    out1 = tmp_path / "train"
    assert cli_main(["train", "--agent", "d3qn", "--config", str(cfg_path),
                     "--seed", "9", "--out", str(out1)]) == 0
    goal_file = out1 / "goal_d3qn_s9.json"
    assert goal_file.exists()

    out2 = tmp_path / "plan"
    assert cli_main(["plan", "--config", str(cfg_path), "--out", str(out2),
                     "--profile", "tree-fast", "--intruders", "3",
                     "--goal-file", str(goal_file)]) == 0
    trace = next(out2.glob("trace_*.jsonl"))

    assert cli_main(["explain", "validate", "--trace", str(trace)]) == 0
    assert cli_main(["explain", "why", "--trace", str(trace), "--step", "0"]) == 0
    assert cli_main(["explain", "why-not", "--trace", str(trace), "--step", "0",
                     "--action", "straight+constant"]) == 0
    assert cli_main(["explain", "path", "--trace", str(trace),
                     "--episode", "0", "--json"]) == 0
    assert cli_main(["explain", "summary", "--trace", str(trace)]) == 0
    assert cli_main(["validate", "--trace", str(trace)]) == 0
    assert cli_main(["validate", "--config", str(cfg_path)]) == 0

    captured = capsys.readouterr()
    assert "margin" in captured.out
    assert "config ok" in captured.out


def test_cli_rejects_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario:\n  num_users: 0\n")
    assert cli_main(["validate", "--config", str(bad)]) == 1
    out = tmp_path / "x"
    assert cli_main(["train", "--agent", "random", "--config", str(bad),
                     "--out", str(out)]) == 2
