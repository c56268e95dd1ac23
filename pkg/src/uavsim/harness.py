"""Experiment orchestration: seeded runs, sweeps, aggregation, artifacts.

Stage 1 trains the service agent and reports its greedy hover coordinate;
stage 2 flies avoidance episodes over an intruder-count grid for each
planner profile.  Intruder layouts depend only on (run seed, sweep seed,
count, episode index), so every profile faces the same set of encounters,
and every artifact is reproducible byte-for-byte from (config, seed) apart
from the timestamp in file headers.
"""

import csv
import hashlib
import json
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    dqn_avoid_policy,
    random_avoid_policy,
    sample_intruders,
    start_ownship,
    train_avoidance_dqn,
)
from .config import ExperimentConfig, SearchProfileConfig, config_hash
from .d3qn import run_training
from .mcts import SearchConfig, fly_episode
from .net import QNetwork, save_checkpoint
from .trace import TraceWriter, avoidance_record, service_record

TREE_PROFILES = ("tree-depth", "tree-fast")
BASELINE_PROFILES = ("dqn-avoid", "random-avoid")

# stream tags for per-purpose RNG substreams
_TAG_INTRUDERS = 11
_TAG_PLANNER = 13
_TAG_AVOID_TRAIN = 17


@dataclass(frozen=True)
class EpisodeRow:
    """One evaluated avoidance episode."""

    profile: str
    intruders: int
    seed: int
    episode: int
    outcome: str
    steps: int
    terminal_reward: float


@dataclass(frozen=True)
class MetricsRow:
    """Aggregated cell of the sweep grid."""

    profile: str
    intruders: int
    seed: int
    episodes: int
    goal_rate: float
    collision_rate: float
    timeout_rate: float
    mean_steps: float
    mean_steps_goal: float
    mean_return: float


def aggregate(rows: list[EpisodeRow]) -> list[MetricsRow]:
    """Per-(profile, count, seed) means in a deterministic row order."""
    if not rows:
        raise ValueError("nothing to aggregate")
    groups: dict[tuple, list[EpisodeRow]] = {}
    for row in rows:
        groups.setdefault((row.profile, row.intruders, row.seed), []).append(row)
    out = []
    for (profile, m, seed) in sorted(groups):
        cell = groups[(profile, m, seed)]
        n = len(cell)
        goals = [r for r in cell if r.outcome == "goal"]
        collisions = [r for r in cell if r.outcome == "collision"]
        timeouts = [r for r in cell if r.outcome == "timeout"]
        out.append(MetricsRow(
            profile=profile,
            intruders=m,
            seed=seed,
            episodes=n,
            goal_rate=len(goals) / n,
            collision_rate=len(collisions) / n,
            timeout_rate=len(timeouts) / n,
            mean_steps=sum(r.steps for r in cell) / n,
            mean_steps_goal=(sum(r.steps for r in goals) / len(goals)
                             if goals else math.nan),
            mean_return=sum(r.terminal_reward for r in cell) / n,
        ))
    return out


def convergence_episode(returns, fraction=0.9, window=10,
                        final_window=50) -> int:
    """Episode index after which the trailing mean stays at level.

    The level is `fraction` of the mean return over the last `final_window`
    episodes; a sustained crossing is used because a single lucky spike in a
    noisy curve says nothing about convergence.
    """
    rets = np.asarray(returns, dtype=float)
    if len(rets) < max(window, final_window):
        raise ValueError("curve too short for the convergence windows")
    target = fraction * rets[-final_window:].mean()
    running = np.convolve(rets, np.ones(window) / window, mode="valid")
    below = np.nonzero(running < target)[0]
    if len(below) == 0:
        return window - 1
    return int(below[-1]) + window


def search_config(profile: SearchProfileConfig, scenario) -> SearchConfig:
    return SearchConfig(
        simulations=profile.simulations,
        search_depth=profile.search_depth,
        exploration_c=profile.exploration_c,
        terminal=scenario.terminal_config(),
        limits=scenario.ownship_limits,
        dt=scenario.dt,
        reward_goal=profile.reward_goal,
        reward_timeout=profile.reward_timeout,
        reward_collision=profile.reward_collision,
    )


def _profile_tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def episode_intruders(cfg: ExperimentConfig, sweep_seed: int, m: int,
                      episode: int):
    """Identical intruder layout for every profile of the same cell/episode."""
    ss = np.random.SeedSequence([cfg.seed, sweep_seed, m, episode, _TAG_INTRUDERS])
    return sample_intruders(np.random.default_rng(ss), m, cfg.scenario)


def run_cell(cfg: ExperimentConfig, profile_name: str, m: int, sweep_seed: int,
             goal, trace_path=None, run_id="", cfg_hash="",
             avoid_weights=None) -> list[EpisodeRow]:
    """Evaluate one (profile, intruder count, seed) cell.

    Tree profiles replan with MCTS every step and write per-decision trace
    records; the two reference baselines fly their policies without traces.
    """
    scenario = cfg.scenario
    sims_profile = cfg.profiles.get(profile_name)
    episodes = cfg.sweep.episodes_per_cell
    # planning always needs a SearchConfig for the terminal rules and limits
    search = search_config(sims_profile or SearchProfileConfig(), scenario)

    if profile_name in TREE_PROFILES:
        policy = None
    elif profile_name == "dqn-avoid":
        if avoid_weights is None:
            raise ValueError("dqn-avoid cells need trained avoidance weights")
        net = _net_from_weights(avoid_weights)
        policy = dqn_avoid_policy(net, goal, cfg.avoid_dqn.train_intruders,
                                  scenario)
    elif profile_name == "random-avoid":
        policy_rng = np.random.default_rng(np.random.SeedSequence(
            [cfg.seed, sweep_seed, m, _profile_tag(profile_name)]))
        policy = random_avoid_policy(policy_rng)
    else:
        raise ValueError(f"unknown profile '{profile_name}'")

    writer = None
    if trace_path is not None:
        writer = TraceWriter(trace_path, run_id=run_id, seed=sweep_seed,
                             config_hash=cfg_hash,
                             meta={"profile": profile_name, "intruders": m})
    rows = []
    try:
        for episode in range(episodes):
            intruders = episode_intruders(cfg, sweep_seed, m, episode)
            own = start_ownship(scenario, goal)
            planner_rng = np.random.default_rng(np.random.SeedSequence(
                [cfg.seed, sweep_seed, m, episode, _TAG_PLANNER,
                 _profile_tag(profile_name)]))
            pending = []

            def on_decision(step, state, action, snapshot):
                if writer is not None and snapshot is not None:
                    pending.append((step, state, action, snapshot))

            result = fly_episode(own, goal, intruders, search, planner_rng,
                                 policy=policy, on_decision=on_decision)
            outcome = result.kind.name.lower()
            if writer is not None:
                for i, (step, state, action, snapshot) in enumerate(pending):
                    verdict = outcome if i == len(pending) - 1 else None
                    writer.record(avoidance_record(
                        episode, step, state, action, snapshot, verdict))
            rows.append(EpisodeRow(
                profile=profile_name,
                intruders=m,
                seed=sweep_seed,
                episode=episode,
                outcome=outcome,
                steps=result.steps,
                terminal_reward=result.terminal_reward,
            ))
    finally:
        if writer is not None:
            writer.close()
    return rows


def dqn_avoid_baseline(net: QNetwork, start, goal, intruders,
                       cfg: ExperimentConfig, rng) -> "EpisodeResult":
    """Fly the trained fixed-M baseline greedily to a terminal verdict."""
    scenario = cfg.scenario
    search = search_config(SearchProfileConfig(), scenario)
    policy = dqn_avoid_policy(net, goal, cfg.avoid_dqn.train_intruders, scenario)
    return fly_episode(start, goal, intruders, search, rng, policy=policy)


def _net_weights(net: QNetwork) -> dict:
    return {
        "input_dim": net.input_dim,
        "hidden_sizes": list(net.hidden_sizes),
        "group_sizes": list(net.group_sizes),
        "dueling": net.dueling,
        "params": [p.copy() for p in net.parameters()],
    }


def _net_from_weights(weights: dict) -> QNetwork:
    net = QNetwork(weights["input_dim"], weights["hidden_sizes"],
                   weights["group_sizes"], weights["dueling"],
                   rng=np.random.default_rng(0))
    net.set_parameters(weights["params"])
    return net


def goal_digest(goal) -> str:
    blob = f"{goal[0]:.6f},{goal[1]:.6f}".encode("ascii")
    return hashlib.sha256(blob).hexdigest()


# --- artifact writers ---------------------------------------------------------


def write_curve_csv(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["episode", "return", "epsilon", "loss_mean"])
        for p in curve:
            out.writerow([p.episode, repr(p.ret), repr(p.epsilon),
                          repr(p.loss_mean)])


def read_curve_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"episode": int(r["episode"]), "return": float(r["return"]),
             "epsilon": float(r["epsilon"]), "loss_mean": float(r["loss_mean"])}
            for r in csv.DictReader(fh)
        ]


def write_metrics_csv(rows: list[MetricsRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["profile", "intruders", "seed", "episodes", "goal_rate",
                      "collision_rate", "timeout_rate", "mean_steps",
                      "mean_steps_goal", "mean_return"])
        for r in rows:
            out.writerow([r.profile, r.intruders, r.seed, r.episodes,
                          repr(r.goal_rate), repr(r.collision_rate),
                          repr(r.timeout_rate), repr(r.mean_steps),
                          repr(r.mean_steps_goal), repr(r.mean_return)])


def write_episodes_csv(rows: list[EpisodeRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["profile", "intruders", "seed", "episode", "outcome",
                      "steps", "terminal_reward"])
        for r in rows:
            out.writerow([r.profile, r.intruders, r.seed, r.episode,
                          r.outcome, r.steps, repr(r.terminal_reward)])


def write_links_csv(details, path):
    """Per-user link rows for the greedy service rollout (one row per user per step)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["step", "user", "distance_m", "path_loss_db", "gain",
                      "sinr", "rate_bps", "served", "power_w"])
        for d in details:
            report = d["report"]
            alloc = d["alloc"]
            for user in range(len(report.rates)):
                out.writerow([
                    d["step"], user,
                    repr(report.distances[user]),
                    repr(report.path_losses_db[user]),
                    repr(report.gains[user]),
                    repr(report.sinrs[user]),
                    repr(report.rates[user]),
                    alloc.served[user],
                    repr(alloc.powers[user]),
                ])


# --- stages -------------------------------------------------------------------


@dataclass
class Stage1Result:
    mode: str
    goal: tuple
    curve_path: str
    checkpoint_path: str | None
    trace_path: str
    greedy_return: float
    goal_path: str = ""


def run_stage1(cfg: ExperimentConfig, out_dir, raw_cfg: dict | None = None,
               agent: str | None = None, seed: int | None = None) -> Stage1Result:
    """Train the service agent, export curve/checkpoint/trace, report the goal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = agent or cfg.agent
    run_seed = cfg.seed if seed is None else seed
    cfg_hash = config_hash(raw_cfg if raw_cfg is not None else {})
    result = run_training(cfg.scenario, cfg.d3qn, mode, run_seed)

    curve_path = out / f"curve_{mode}_s{run_seed}.csv"
    write_curve_csv(result.curve, curve_path)

    checkpoint_path = None
    if result.net is not None:
        checkpoint_path = out / f"checkpoint_{mode}_s{run_seed}.json"
        save_checkpoint(result.net, checkpoint_path, extra={
            "mode": mode,
            "seed": run_seed,
            "gain_norm_lo": result.normalizer.lo,
            "gain_norm_hi": result.normalizer.hi,
            "goal": [result.goal_pose.x, result.goal_pose.y, result.goal_pose.h],
        })

    trace_path = out / f"trace_service_{mode}_s{run_seed}.jsonl"
    with TraceWriter(trace_path, run_id=f"stage1-{mode}-s{run_seed}",
                     seed=run_seed, config_hash=cfg_hash,
                     meta={"agent": mode}) as writer:
        for detail in result.greedy_steps:
            writer.record(service_record(0, detail["step"], detail["obs"],
                                         detail))
    if result.greedy_steps:
        write_links_csv(result.greedy_steps, out / f"links_{mode}_s{run_seed}.csv")

    goal = (result.goal_pose.x, result.goal_pose.y)
    goal_path = out / f"goal_{mode}_s{run_seed}.json"
    goal_doc = {
        "goal_xy": [goal[0], goal[1]],
        "goal_hash": goal_digest(goal),
        "agent": mode,
        "seed": run_seed,
        "greedy_return": result.greedy_return,
    }
    with open(goal_path, "w", encoding="utf-8") as fh:
        json.dump(goal_doc, fh, indent=2)
        fh.write("\n")
    return Stage1Result(mode=mode, goal=goal, curve_path=str(curve_path),
                        checkpoint_path=(str(checkpoint_path)
                                         if checkpoint_path else None),
                        trace_path=str(trace_path),
                        greedy_return=result.greedy_return,
                        goal_path=str(goal_path))


def _cell_job(args):
    cfg, profile, m, seed, goal, trace_path, run_id, cfg_hash, weights = args
    return run_cell(cfg, profile, m, seed, goal, trace_path, run_id, cfg_hash,
                    weights)


def run_sweep(cfg: ExperimentConfig, out_dir, goal, raw_cfg: dict | None = None,
              jobs: int = 1) -> tuple[list[EpisodeRow], list[MetricsRow]]:
    """Stage 2: evaluate every (profile, count, seed) cell of the grid."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(raw_cfg if raw_cfg is not None else {})
    sweep = cfg.sweep

    avoid_nets: dict[int, dict] = {}
    if "dqn-avoid" in sweep.profiles:
        for seed in sweep.seeds:
            net, stats = train_avoidance_dqn(
                cfg.scenario, goal, cfg.avoid_dqn,
                seed=int(np.random.SeedSequence(
                    [cfg.seed, seed, _TAG_AVOID_TRAIN]).generate_state(1)[0]))
            avoid_nets[seed] = _net_weights(net)

    tasks = []
    for profile in sweep.profiles:
        for m in sweep.intruder_counts:
            for seed in sweep.seeds:
                trace_path = None
                if sweep.trace and profile in TREE_PROFILES:
                    trace_path = str(out / f"trace_{profile}_m{m}_s{seed}.jsonl")
                run_id = f"sweep-{profile}-m{m}-s{seed}"
                tasks.append((cfg, profile, m, seed, goal, trace_path, run_id,
                              cfg_hash, avoid_nets.get(seed)))

    rows: list[EpisodeRow] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell_rows in pool.map(_cell_job, tasks):
                rows.extend(cell_rows)
    else:
        for task in tasks:
            rows.extend(_cell_job(task))

    rows.sort(key=lambda r: (r.profile, r.intruders, r.seed, r.episode))
    table = aggregate(rows)
    write_episodes_csv(rows, out / "episodes.csv")
    write_metrics_csv(table, out / "metrics.csv")
    return rows, table


def run_pipeline(cfg: ExperimentConfig, out_dir, raw_cfg: dict | None = None,
                 jobs: int = 1) -> dict:
    """Stage 1 then stage 2, with a manifest tying the two together.

    Stage 2 re-reads the goal from the stage-1 artifact and the manifest
    records both hashes, so any drift between the stages is detectable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage1 = run_stage1(cfg, out, raw_cfg)
    with open(stage1.goal_path, encoding="utf-8") as fh:
        goal_doc = json.load(fh)
    goal = tuple(goal_doc["goal_xy"])
    rows, table = run_sweep(cfg, out, goal, raw_cfg, jobs=jobs)

    stage2_goal_hash = goal_digest(goal)
    if stage2_goal_hash != goal_doc["goal_hash"]:
        raise RuntimeError("stage-2 goal diverged from stage-1 coordinate")
    manifest = {
        "version": __version__,
        "config_hash": config_hash(raw_cfg if raw_cfg is not None else {}),
        "seed": cfg.seed,
        "agent": stage1.mode,
        "goal_xy": list(goal),
        "goal_hash_stage1": goal_doc["goal_hash"],
        "goal_hash_stage2": stage2_goal_hash,
        "sweep": {
            "profiles": list(cfg.sweep.profiles),
            "intruder_counts": list(cfg.sweep.intruder_counts),
            "seeds": list(cfg.sweep.seeds),
            "episodes_per_cell": cfg.sweep.episodes_per_cell,
        },
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(out / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"stage1": stage1, "rows": rows, "metrics": table,
            "manifest": manifest}
