"""Command line entry points: train, plan, sweep, explain, validate."""

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .harness import (
    aggregate,
    goal_digest,
    run_cell,
    run_pipeline,
    run_stage1,
    write_episodes_csv,
    write_metrics_csv,
)
from .trace import (
    TraceError,
    explain_path,
    explain_summary,
    explain_why,
    explain_why_not,
    read_trace,
    validate_trace,
)


def _load(args):
    if args.config:
        cfg, raw = load_config(args.config)
    else:
        cfg, raw = ExperimentConfig(), {}
    if getattr(args, "seed", None) is not None:
        cfg = ExperimentConfig(scenario=cfg.scenario, d3qn=cfg.d3qn,
                               profiles=cfg.profiles, avoid_dqn=cfg.avoid_dqn,
                               sweep=cfg.sweep, agent=cfg.agent, seed=args.seed)
    return cfg, raw


def cmd_train(args):
    cfg, raw = _load(args)
    stage1 = run_stage1(cfg, args.out, raw, agent=args.agent, seed=args.seed)
    print(f"agent {stage1.mode}: greedy return {stage1.greedy_return:.6g}")
    print(f"service coordinate: ({stage1.goal[0]:.2f}, {stage1.goal[1]:.2f})")
    print(f"curve: {stage1.curve_path}")
    if stage1.checkpoint_path:
        print(f"checkpoint: {stage1.checkpoint_path}")
    print(f"trace: {stage1.trace_path}")
    return 0


def cmd_plan(args):
    cfg, raw = _load(args)
    if args.goal:
        goal = (float(args.goal[0]), float(args.goal[1]))
    elif args.goal_file:
        with open(args.goal_file, encoding="utf-8") as fh:
            goal = tuple(json.load(fh)["goal_xy"])
    else:
        print("error: provide --goal X Y or --goal-file", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = None
    if args.trace:
        trace_path = str(out / f"trace_{args.profile}_m{args.intruders}"
                               f"_s{cfg.seed}.jsonl")
    rows = run_cell(cfg, args.profile, args.intruders, cfg.seed, goal,
                    trace_path=trace_path,
                    run_id=f"plan-{args.profile}", cfg_hash=config_hash(raw))
    write_episodes_csv(rows, out / "episodes.csv")
    write_metrics_csv(aggregate(rows), out / "metrics.csv")
    table = aggregate(rows)[0]
    print(f"profile {args.profile}, M={args.intruders}: "
          f"goal {table.goal_rate:.3f} collision {table.collision_rate:.3f} "
          f"timeout {table.timeout_rate:.3f} mean steps {table.mean_steps:.1f}")
    print(f"goal hash: {goal_digest(goal)}")
    return 0


def cmd_sweep(args):
    cfg, raw = _load(args)
    result = run_pipeline(cfg, args.out, raw, jobs=args.jobs)
    print(f"service coordinate: {result['manifest']['goal_xy']}")
    for row in result["metrics"]:
        print(f"{row.profile:14s} M={row.intruders:3d} seed={row.seed}: "
              f"goal {row.goal_rate:.3f} collision {row.collision_rate:.3f} "
              f"timeout {row.timeout_rate:.3f}")
    print(f"artifacts in {args.out}")
    return 0


def _print_explanation(explanation, as_json):
    if as_json:
        print(json.dumps(explanation.to_dict(), sort_keys=True))
    else:
        print(explanation.to_text())


def cmd_explain(args):
    if args.explain_cmd == "validate":
        report = validate_trace(args.trace)
        print(report.to_text())
        return 0 if report.ok else 1
    try:
        data = read_trace(args.trace)
        if args.explain_cmd == "why":
            exp = explain_why(data, args.step, args.episode, args.phase)
        elif args.explain_cmd == "why-not":
            exp = explain_why_not(data, args.step, args.action, args.episode,
                                  args.phase)
        elif args.explain_cmd == "path":
            exp = explain_path(data, args.episode,
                               args.phase or "avoidance")
        else:
            exp = explain_summary(data)
    except TraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _print_explanation(exp, args.json)
    return 0


def cmd_validate(args):
    if args.trace:
        report = validate_trace(args.trace)
        print(report.to_text())
        return 0 if report.ok else 1
    try:
        cfg, raw = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    print(f"config ok (hash {config_hash(raw)[:16]})")
    print(f"agent={cfg.agent} seed={cfg.seed} users={cfg.scenario.num_users} "
          f"profiles={sorted(cfg.profiles)}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uavsim",
        description="UAV service-coordinate learning, collision-free "
                    "trajectory planning, and decision-trace tooling.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="stage 1: train the service agent")
    train.add_argument("--agent", choices=("d3qn", "dqn", "random"))
    train.add_argument("--config")
    train.add_argument("--seed", type=int)
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    plan = sub.add_parser("plan", help="fly avoidance episodes for one cell")
    plan.add_argument("--config")
    plan.add_argument("--seed", type=int)
    plan.add_argument("--out", required=True)
    plan.add_argument("--profile", default="tree-depth")
    plan.add_argument("--intruders", type=int, default=10)
    plan.add_argument("--goal", nargs=2, metavar=("X", "Y"))
    plan.add_argument("--goal-file", help="goal JSON produced by train")
    plan.add_argument("--trace", action="store_true", default=True)
    plan.add_argument("--no-trace", dest="trace", action="store_false")
    plan.set_defaults(func=cmd_plan)

    sweep = sub.add_parser("sweep", help="full pipeline: train + sweep grid")
    sweep.add_argument("--config")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.set_defaults(func=cmd_sweep)

    explain = sub.add_parser("explain", help="query a decision trace")
    esub = explain.add_subparsers(dest="explain_cmd", required=True)
    why = esub.add_parser("why", help="score breakdown of a chosen action")
    why.add_argument("--trace", required=True)
    why.add_argument("--step", type=int, required=True)
    why.add_argument("--episode", type=int, default=0)
    why.add_argument("--phase", choices=("service", "avoidance"))
    why.add_argument("--json", action="store_true")
    why.set_defaults(func=cmd_explain)
    whynot = esub.add_parser("why-not", help="score deficit of an alternative")
    whynot.add_argument("--trace", required=True)
    whynot.add_argument("--step", type=int, required=True)
    whynot.add_argument("--action", required=True)
    whynot.add_argument("--episode", type=int, default=0)
    whynot.add_argument("--phase", choices=("service", "avoidance"))
    whynot.add_argument("--json", action="store_true")
    whynot.set_defaults(func=cmd_explain)
    path = esub.add_parser("path", help="decision sequence of an episode")
    path.add_argument("--trace", required=True)
    path.add_argument("--episode", type=int, default=0)
    path.add_argument("--phase", choices=("service", "avoidance"))
    path.add_argument("--json", action="store_true")
    path.set_defaults(func=cmd_explain)
    summary = esub.add_parser("summary", help="verdict counts and margins")
    summary.add_argument("--trace", required=True)
    summary.add_argument("--json", action="store_true")
    summary.set_defaults(func=cmd_explain)
    validate_sub = esub.add_parser("validate", help="re-check trace invariants")
    validate_sub.add_argument("--trace", required=True)
    validate_sub.set_defaults(func=cmd_explain)

    validate = sub.add_parser("validate", help="validate a config or a trace")
    group = validate.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--trace")
    validate.set_defaults(func=cmd_validate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
