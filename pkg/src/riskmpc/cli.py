"""Command-line entry points: run sweeps, summarize metrics, replay rollouts."""

from __future__ import annotations

import argparse
import sys

from . import harness


def _cmd_run(args):
    config = harness.config_from_yaml(args.config)
    records = harness.run_experiment(config, out_dir=args.out, jobs=args.jobs)
    n_runs = len({(r.point_tag, r.seed) for r in records})
    print(f"completed {n_runs} runs, {len(records)} iteration records "
          f"-> {args.out or config.output_dir}")
    return 0


def _cmd_summarize(args):
    records = harness.read_metrics_csv(args.metrics)
    thresholds = [float(v) for v in args.thresholds.split(",") if v.strip()]
    crash_rows = harness.crash_speed_summary(records, thresholds)
    curve_rows = harness.task_performance_curve(records)
    if args.out_crash:
        harness.write_crash_summary_csv(args.out_crash, crash_rows)
    if args.out_curve:
        harness.write_task_curve_csv(args.out_curve, curve_rows)
    for row in crash_rows:
        print(f"{row['point_tag']}: crashes >= {row['threshold']:g} m/s: "
              f"{row['mean_crashes_at_or_above']:.2f} "
              f"+- {row['std_crashes_at_or_above']:.2f} (n={row['n_seeds']})")
    return 0


def _cmd_replay(args):
    reports = harness.replay_rollout_log(args.rollout_log)
    worst = 0.0
    for rep in reports:
        worst = max(worst, rep["max_state_deviation"])
        print(f"rollout {rep['rollout']}: {rep['steps']} steps, "
              f"reason={rep['reason']}, "
              f"max state deviation {rep['max_state_deviation']:.3e}, "
              f"collided logged={rep['logged_collided']} "
              f"replayed={rep['replayed_collided']}")
    print(f"max deviation across rollouts: {worst:.3e}")
    return 0 if worst < 1e-9 else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="riskmpc")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment sweep from a config file")
    p_run.add_argument("--config", required=True, help="YAML experiment config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="parallel (grid point x seed) runs")
    p_run.set_defaults(func=_cmd_run)

    p_sum = sub.add_parser("summarize", help="summarize a metrics.csv")
    p_sum.add_argument("--metrics", required=True)
    p_sum.add_argument("--thresholds", default="0.0,0.1,0.2,0.3,0.4,0.5,0.6",
                       help="comma-separated crash speed thresholds (m/s)")
    p_sum.add_argument("--out-crash", default=None,
                       help="write crash summary CSV here")
    p_sum.add_argument("--out-curve", default=None,
                       help="write task performance curve CSV here")
    p_sum.set_defaults(func=_cmd_summarize)

    p_rep = sub.add_parser("replay", help="re-simulate a logged iteration")
    p_rep.add_argument("--rollout-log", required=True, help="rollouts_iter*.npz")
    p_rep.set_defaults(func=_cmd_replay)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
