"""Command-line entry point: train, evaluate, demo (oracle controller),
reward-check on scene files, and plot rendering.

Every subcommand writes only inside its declared output paths. The
TEAMHOI_THREADS environment variable caps the worker/thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import numpy as np

from .env import CarryEnv, EnvConfig
from .rewards import RewardWeights, evaluate_rewards
from .train import RunConfig, train_loop
from .world import SceneError, dump_trajectory, load_scene, load_trajectory
from . import metrics as metrics_mod

BUNDLED_SCENES = ("square-4-midpoints", "two-same-edge", "ideal-grip")


def _apply_thread_cap() -> None:
    cap = os.environ.get("TEAMHOI_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SystemExit(f"{path}: not valid JSON (line {e.lineno}): {e.msg}")
    try:
        return RunConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise SystemExit(f"{path}: {e}")


def _resolve_scene(name_or_path: str):
    if name_or_path in BUNDLED_SCENES:
        ref = resources.files("teamhoi").joinpath(f"scenes/{name_or_path}.json")
        with resources.as_file(ref) as p:
            return load_scene(p)
    return load_scene(name_or_path)


def cmd_train(args) -> int:
    config = _load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.iters is not None:
        config.iters = args.iters
    if args.stage is not None:
        config.stage = args.stage
    if args.out is not None:
        config.out_dir = args.out
    try:
        result = train_loop(config, resume=args.resume)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


def cmd_eval(args) -> int:
    team_sizes = [int(x) for x in args.team_sizes.split(",")]
    shapes = args.shapes.split(",")
    if args.policy in ("oracle", "random", "zero"):
        policy = metrics_mod.make_policy(args.policy, seed=args.seed)
    else:
        if not os.path.exists(args.policy):
            print(f"error: checkpoint not found: {args.policy}", file=sys.stderr)
            return 1
        policy = metrics_mod.make_policy("checkpoint", args.policy)
    template = EnvConfig(team_size=2, episode_len=args.episode_len, seed=args.seed)
    report = metrics_mod.evaluate(policy, template, team_sizes, shapes,
                                  args.episodes, seed=args.seed,
                                  mass_scale=args.mass_scale)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "report.csv")
    json_path = os.path.join(args.out, "report.json")
    fig_path = os.path.join(args.out, "report.svg")
    metrics_mod.write_report_csv(report, csv_path)
    metrics_mod.write_report_json(report, json_path, per_episode=args.per_episode)
    from . import plotting

    plotting.plot_report(report, fig_path)
    if args.per_episode:
        metrics_mod.write_episodes_jsonl(report,
                                         os.path.join(args.out, "episodes.jsonl"))
    for row in report.rows:
        print(f"team={row.team_size} shape={row.shape} SR={row.sr_percent:.1f}% "
              f"d={row.mean_d:.3f} t_coop={row.mean_t_coop_percent:.1f}% "
              f"|J|={row.mean_jerk:.2f}")
    print(f"wrote {csv_path}, {json_path}, {fig_path}")
    return 0


def cmd_demo(args) -> int:
    cfg = EnvConfig(team_size=args.team_size,
                    table=metrics_mod.table_for_shape(args.shape, args.mass_scale),
                    episode_len=args.episode_len, seed=args.seed)
    env = CarryEnv(cfg)
    policy = metrics_mod.make_policy(args.policy, seed=args.seed)
    trajectory = metrics_mod.run_episode(env, policy, seed=args.seed)
    m = metrics_mod.episode_metrics(trajectory, cfg.dt, args.team_size, args.shape,
                                    args.seed)
    dump_trajectory(trajectory, args.out)
    print(json.dumps(m.to_dict()))
    print(f"wrote {args.out}")
    return 0


def cmd_reward_check(args) -> int:
    try:
        world = _resolve_scene(args.scene)
    except FileNotFoundError:
        print(f"error: scene not found: {args.scene} "
              f"(bundled scenes: {', '.join(BUNDLED_SCENES)})", file=sys.stderr)
        return 1
    except SceneError as e:
        print(f"error: malformed scene: {e}", file=sys.stderr)
        return 1
    evaluation = evaluate_rewards(world, RewardWeights())
    doc = {"agents": [b.to_dict() for b in evaluation.breakdowns]}
    if args.verbose:
        frame = world.geometry.frame
        doc["geometry"] = {
            "com": frame.com.tolist(),
            "u1": frame.u1.tolist(),
            "u2": frame.u2.tolist(),
            "extents": list(frame.extents),
            "g1": evaluation.g1,
            "g2": evaluation.g2,
            "r_cov": evaluation.r_cov,
            "support_hull": world.geometry
                .coverage_support(world.roots_table_frame()).vertices.tolist(),
            "all_gripped": evaluation.all_gripped,
            "putdown_active": evaluation.putdown_active,
        }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_plot(args) -> int:
    from . import plotting

    try:
        with open(args.input) as f:
            first = f.readline()
    except OSError as e:
        print(f"error: cannot read {args.input}: {e}", file=sys.stderr)
        return 1
    try:
        if first.startswith("iter,"):
            plotting.plot_metrics_csv(args.input, args.out)
        else:
            plotting.plot_trajectory(load_trajectory(args.input), args.out)
    except (SceneError, ValueError, json.JSONDecodeError) as e:
        print(f"error: cannot plot {args.input}: {e}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teamhoi",
        description="Cooperative table-carrying: training, evaluation, and "
                    "reward inspection on the planar surrogate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the PPO + dual-discriminator trainer")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--iters", type=int, help="override the iteration count")
    p.add_argument("--stage", choices=["formation-only", "full-task"],
                   help="override the training stage")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--resume", help="trainer checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy over a team-size/shape grid")
    p.add_argument("--policy", default="oracle",
                   help="'oracle', 'random', 'zero', or a checkpoint path")
    p.add_argument("--team-sizes", default="2,4,8")
    p.add_argument("--shapes", default="round,square,rectangle")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--episode-len", type=int, default=600)
    p.add_argument("--mass-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="eval_out")
    p.add_argument("--per-episode", action="store_true",
                   help="also write per-episode JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="run one scripted-oracle episode and dump "
                                    "its trajectory")
    p.add_argument("--team-size", type=int, default=4)
    p.add_argument("--shape", default="square")
    p.add_argument("--policy", default="oracle")
    p.add_argument("--mass-scale", type=float, default=1.0)
    p.add_argument("--episode-len", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="demo_trajectory.jsonl")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("reward-check", help="evaluate every reward component "
                                            "on a static scene")
    p.add_argument("scene", help=f"scene JSON path or one of: "
                                 f"{', '.join(BUNDLED_SCENES)}")
    p.add_argument("--verbose", action="store_true",
                   help="include principal axes, support hull, and coverage")
    p.set_defaults(func=cmd_reward_check)

    p = sub.add_parser("plot", help="render a trajectory dump or metrics CSV "
                                    "to SVG")
    p.add_argument("input", help="trajectory .jsonl or metrics .csv")
    p.add_argument("--out", default="plot.svg")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
