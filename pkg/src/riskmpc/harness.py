"""Config-driven experiment runner: lambda sweeps, seeds, metrics CSVs.

Every (grid point, seed) pair is an independent run whose random streams
are derived only from the point's parameter values and the seed, never
from execution order, so results are identical no matter which other runs
share the invocation.  Runs checkpoint after every iteration and resume
from the last completed one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .cost import CostParams
from .data import Dataset, FeatureSpec, load_dataset, save_dataset
from .ensemble import BootstrapEnsemble, load_ensemble, save_ensemble, train
from .planner import ActionLibrary, build_car_library, build_quadrotor_library
from .rl import run_iteration
from .sim import (Environment, SimProfile, VehicleState, environment_from_yaml,
                  environment_to_yaml, load_environment, step)

PROFILES = ("quadrotor_sim", "car_sim")

METRICS_COLUMNS = [
    "point_tag", "estimator_mode", "lambda_coll", "lambda_std", "lambda_const",
    "seed", "iteration", "n_rollouts", "n_crashes", "crash_speeds",
    "mean_task_speed", "successes", "n_samples",
]
CRASH_SUMMARY_COLUMNS = ["point_tag", "threshold", "mean_crashes_at_or_above",
                         "std_crashes_at_or_above", "n_seeds"]
TASK_CURVE_COLUMNS = ["point_tag", "iteration", "mean_task_speed_mean",
                      "mean_task_speed_std", "mean_task_speed_min",
                      "mean_task_speed_max"]

# Purpose tags appended to the per-run entropy when deriving seed streams.
_SEED_INIT = 101
_SEED_PRETRAIN = 102
_SEED_ITERATION = 103


@dataclass
class ExperimentConfig:
    profile: str = "quadrotor_sim"
    horizon: int = 6
    delta_t: float = 0.2
    target_speed: float = 0.5
    max_speed: float = 1.0
    max_steer: float = 0.45
    camera_width: int = 16
    camera_height: int = 16
    fov: float = math.pi / 2
    max_depth: float = 3.0
    body_radius: float = 0.05
    wheelbase: float = 0.25
    env_file: str | None = None
    start_x: float = 0.4
    start_y_range: tuple = (1.4, 2.6)
    start_points: list = field(default_factory=list)   # car profile starts
    include_state: bool = False
    n_models: int = 50
    keep_prob: float = 0.8
    eval_dropout_passes: int = 10
    learning_rate: float = 1e-3
    sgd_iters: int = 300
    batch_size: int = 32
    reset_models_each_round: bool = False
    n_iterations: int = 20
    rollouts_per_iteration: int = 20
    max_steps: int = 25
    lambda_coll: list = field(default_factory=lambda: [10.0])
    lambda_std: list | None = field(default_factory=lambda: [0.0])
    lambda_const: list | None = None
    task_cost_terminal_only: bool = False
    crash_speed_thresholds: list = field(
        default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    demonstrations: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if not self.lambda_coll:
            raise ValueError("lambda_coll grid must be nonempty")
        if self.lambda_std is not None and self.lambda_const is not None:
            raise ValueError("give a lambda_std grid or a lambda_const grid, not both")
        if self.lambda_std is not None and len(self.lambda_std) == 0:
            raise ValueError("lambda_std grid must be nonempty")
        if self.lambda_const is not None and len(self.lambda_const) == 0:
            raise ValueError("lambda_const grid must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.seeds:
            raise ValueError("need at least one seed")

    @property
    def cost_profile(self) -> str:
        return "quadrotor" if self.profile == "quadrotor_sim" else "car"


def default_config(profile: str) -> ExperimentConfig:
    """Profile-consistent defaults for the two simulated setups."""
    if profile == "quadrotor_sim":
        return ExperimentConfig(profile="quadrotor_sim")
    if profile == "car_sim":
        return ExperimentConfig(
            profile="car_sim", horizon=4, delta_t=0.5, target_speed=1.2,
            max_speed=1.7, max_steer=0.45, camera_width=32, camera_height=18,
            fov=1.75, max_depth=5.0, body_radius=0.1, wheelbase=0.25,
            start_points=[[0.5, 0.7, 0.0], [0.5, 0.9, 0.0],
                          [0.5, 1.1, 0.0], [0.5, 1.3, 0.0]],
            n_models=5, keep_prob=0.95, eval_dropout_passes=10,
            n_iterations=10, rollouts_per_iteration=20, max_steps=10,
            lambda_coll=[10.0])
    raise ValueError(f"unknown profile {profile!r}")


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from a mapping; unknown keys are rejected."""
    if "profile" not in doc:
        raise ValueError("config must name a profile")
    base = default_config(doc["profile"])
    known = set(asdict(base))
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = {**asdict(base), **doc}
    if merged.get("start_y_range") is not None:
        merged["start_y_range"] = tuple(merged["start_y_range"])
    return ExperimentConfig(**merged)


def config_from_yaml(path) -> ExperimentConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must contain a mapping")
    return config_from_dict(doc)


def config_to_yaml(config: ExperimentConfig) -> str:
    doc = asdict(config)
    doc["start_y_range"] = list(doc["start_y_range"])
    return yaml.safe_dump(doc, sort_keys=True)


@dataclass
class MetricsRecord:
    point_tag: str
    estimator_mode: str
    lambda_coll: float
    lambda_std: float
    lambda_const: float
    seed: int
    iteration: int
    n_rollouts: int
    crash_speeds: list
    mean_task_speed: float
    successes: list
    n_samples: int


def grid_points(config: ExperimentConfig):
    """Resolve the lambda sweep into (tag, CostParams) pairs, in sweep order."""
    points = []
    for lc in config.lambda_coll:
        if config.lambda_const is not None:
            for v in config.lambda_const:
                tag = f"coll{lc:g}_const{v:g}"
                points.append((tag, CostParams(
                    lambda_coll=lc, lambda_std=0.0, lambda_const=v,
                    target_speed=config.target_speed,
                    estimator_mode="const_penalty", profile=config.cost_profile,
                    task_cost_terminal_only=config.task_cost_terminal_only)))
        elif config.lambda_std is not None:
            for v in config.lambda_std:
                tag = f"coll{lc:g}_std{v:g}"
                points.append((tag, CostParams(
                    lambda_coll=lc, lambda_std=v, lambda_const=0.0,
                    target_speed=config.target_speed,
                    estimator_mode="risk_averse", profile=config.cost_profile,
                    task_cost_terminal_only=config.task_cost_terminal_only)))
        else:
            tag = f"coll{lc:g}_plain"
            points.append((tag, CostParams(
                lambda_coll=lc, lambda_std=0.0, lambda_const=0.0,
                target_speed=config.target_speed,
                estimator_mode="plain", profile=config.cost_profile,
                task_cost_terminal_only=config.task_cost_terminal_only)))
    return points


def sim_profile(config: ExperimentConfig) -> SimProfile:
    dynamics = "velocity" if config.profile == "quadrotor_sim" else "unicycle"
    return SimProfile(name=config.cost_profile, dynamics=dynamics,
                      delta_t=config.delta_t, body_radius=config.body_radius,
                      camera_width=config.camera_width,
                      camera_height=config.camera_height, fov=config.fov,
                      max_depth=config.max_depth, wheelbase=config.wheelbase)


def default_environment(config: ExperimentConfig) -> Environment:
    """Built-in arenas: a bounded square with one cylinder ahead of the start
    line (quadrotor), or a walled corridor with one obstacle (car)."""
    if config.profile == "quadrotor_sim":
        return Environment(circles=(((2.0, 2.0), 0.2),), bounds=(0.0, 0.0, 4.0, 4.0))
    return Environment(circles=(((4.0, 1.0), 0.2),), bounds=(0.0, 0.0, 10.0, 2.0))


def experiment_environment(config: ExperimentConfig) -> Environment:
    if config.env_file:
        return load_environment(config.env_file)
    return default_environment(config)


def build_library(config: ExperimentConfig) -> ActionLibrary:
    if config.profile == "quadrotor_sim":
        return build_quadrotor_library(config.horizon, config.max_speed)
    return build_car_library(config.horizon, config.max_speed, config.max_steer)


def make_init_state_sampler(config: ExperimentConfig):
    if config.profile == "quadrotor_sim":
        x = config.start_x
        lo, hi = config.start_y_range

        def sampler(rng, rollout_index):
            return VehicleState(position=(x, rng.uniform(lo, hi)),
                                velocity=(0.0, 0.0), heading=0.0)
        return sampler

    starts = config.start_points

    def sampler(rng, rollout_index):
        x, y, heading = starts[rollout_index % len(starts)]
        return VehicleState(position=(x, y), velocity=(0.0, 0.0), heading=heading)
    return sampler


def feature_spec(config: ExperimentConfig) -> FeatureSpec:
    state_dim = sim_profile(config).state_dim() if config.include_state else 0
    return FeatureSpec(state_dim=state_dim,
                       control_len=config.horizon * 2,
                       obs_len=config.camera_width * config.camera_height)


def _point_entropy(tag: str, seed: int):
    """Entropy words derived only from the grid-point values and seed."""
    digest = hashlib.sha256(tag.encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return words + [int(seed)]


def _purpose_seed(tag: str, seed: int, purpose: int, index: int = 0):
    return np.random.SeedSequence(_point_entropy(tag, seed) + [purpose, index])


def _fmt(x) -> str:
    """Shortest round-trip decimal form; fixed across runs for identical CSVs."""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x))


def _atomic_save(path: Path, save_fn):
    # keep the .npz suffix on the temp name: np.savez appends it otherwise
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    save_fn(tmp)
    os.replace(tmp, path)


def _save_rollout_log(path: Path, rollouts, env: Environment,
                      profile: SimProfile, iteration: int):
    arrays = {
        "format_version": 1,
        "iteration": iteration,
        "n_rollouts": len(rollouts),
        "env_yaml": environment_to_yaml(env),
        "profile_json": json.dumps(asdict(profile), sort_keys=True),
    }
    for r, ro in enumerate(rollouts):
        arrays[f"r{r}_states"] = np.stack([s.as_vector() for s in ro.states])
        arrays[f"r{r}_controls"] = (np.stack(ro.controls) if ro.controls
                                    else np.zeros((0, 2)))
        arrays[f"r{r}_chosen_indices"] = np.array(ro.chosen_indices, dtype=np.int64)
        arrays[f"r{r}_chosen_costs"] = np.array(ro.chosen_costs, dtype=float)
        arrays[f"r{r}_collided"] = int(ro.collided)
        arrays[f"r{r}_crash_speed"] = (float(ro.crash_speed)
                                       if ro.crash_speed is not None else np.nan)
        arrays[f"r{r}_reason"] = ro.reason
    np.savez_compressed(path, **arrays)


def replay_rollout_log(path):
    """Re-execute a logged rollout's controls through the simulator.

    Returns a per-rollout report with the maximum deviation between logged
    and re-simulated states (exactly zero when dynamics and log agree) and
    the re-checked collision outcome.
    """
    from .sim import check_collision   # local import to keep module load light

    with np.load(path, allow_pickle=False) as z:
        env = environment_from_yaml(str(z["env_yaml"]))
        pdoc = json.loads(str(z["profile_json"]))
        profile = SimProfile(**pdoc)
        n = int(z["n_rollouts"])
        reports = []
        for r in range(n):
            logged = z[f"r{r}_states"]
            controls = z[f"r{r}_controls"]
            state = VehicleState(position=logged[0, 0:2], velocity=logged[0, 2:4],
                                 heading=float(logged[0, 4]))
            sim_states = [state]
            for u in controls:
                sim_states.append(step(sim_states[-1], u, profile.delta_t, profile))
            replayed = np.stack([s.as_vector() for s in sim_states])
            max_dev = float(np.max(np.abs(replayed - logged))) if logged.size else 0.0
            collided_again = check_collision(sim_states[-1], env, profile.body_radius)
            reports.append({
                "rollout": r,
                "steps": controls.shape[0],
                "max_state_deviation": max_dev,
                "logged_collided": bool(int(z[f"r{r}_collided"])),
                "replayed_collided": bool(collided_again),
                "reason": str(z[f"r{r}_reason"]),
            })
    return reports


def _run_single(config: ExperimentConfig, tag: str, cost_params: CostParams,
                seed: int, run_dir: Path):
    """Run (or resume) one grid point x seed; returns its MetricsRecord list."""
    run_dir.mkdir(parents=True, exist_ok=True)
    env = experiment_environment(config)
    profile = sim_profile(config)
    library = build_library(config)
    spec = feature_spec(config)
    sampler = make_init_state_sampler(config)

    meta_path = run_dir / "meta.json"
    metrics_path = run_dir / "metrics.jsonl"
    ckpt_path = run_dir / "checkpoint.npz"
    data_path = run_dir / "dataset.npz"

    completed = 0
    if meta_path.exists():
        completed = int(json.loads(meta_path.read_text())["completed_iterations"])

    lines = []
    if metrics_path.exists():
        for line in metrics_path.read_text().splitlines():
            try:
                lines.append(json.loads(line))
            except json.JSONDecodeError:
                break
    if len(lines) != completed:
        # A crash can leave one extra (or partial) line; the checkpointed
        # state is authoritative, so drop anything past it and recompute.
        lines = lines[:completed]
        metrics_path.write_text(
            "".join(json.dumps(l, sort_keys=True) + "\n" for l in lines))

    if completed > 0:
        ensemble = load_ensemble(ckpt_path)
        dataset = load_dataset(data_path)
    else:
        init_rng = np.random.default_rng(_purpose_seed(tag, seed, _SEED_INIT))
        ensemble = BootstrapEnsemble(spec, config.n_models, config.keep_prob,
                                     config.eval_dropout_passes, init_rng,
                                     lr=config.learning_rate)
        dataset = Dataset()
        if config.demonstrations:
            demo = load_dataset(config.demonstrations)
            dataset.samples.extend(demo.samples)
            dataset.iteration_tags.extend(demo.iteration_tags)
            if len(dataset) > 0:
                train(ensemble, dataset, config.sgd_iters,
                      np.random.default_rng(_purpose_seed(tag, seed, _SEED_PRETRAIN)),
                      batch_size=config.batch_size)

    for i in range(completed, config.n_iterations):
        metrics, rollouts = run_iteration(
            env, ensemble, library, cost_params, dataset,
            config.rollouts_per_iteration, sampler, profile,
            seed=_purpose_seed(tag, seed, _SEED_ITERATION, i), iteration=i,
            max_steps=config.max_steps, sgd_iters=config.sgd_iters,
            batch_size=config.batch_size,
            reset_models=config.reset_models_each_round)
        _atomic_save(run_dir / f"rollouts_iter{i:03d}.npz",
                     lambda p: _save_rollout_log(p, rollouts, env, profile, i))
        line = {
            "iteration": i,
            "crash_speeds": [float(v) for v in metrics.crash_speeds],
            "mean_task_speed": float(metrics.mean_task_speed),
            "successes": [bool(v) for v in metrics.successes],
            "n_samples": int(metrics.n_samples),
        }
        lines.append(line)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
            fh.flush()
        _atomic_save(ckpt_path, lambda p: save_ensemble(p, ensemble))
        _atomic_save(data_path, lambda p: save_dataset(p, dataset))
        meta_tmp = meta_path.with_suffix(".json.tmp")
        meta_tmp.write_text(json.dumps({"completed_iterations": i + 1}))
        os.replace(meta_tmp, meta_path)

    records = []
    for line in lines:
        records.append(MetricsRecord(
            point_tag=tag, estimator_mode=cost_params.estimator_mode,
            lambda_coll=cost_params.lambda_coll, lambda_std=cost_params.lambda_std,
            lambda_const=cost_params.lambda_const, seed=seed,
            iteration=int(line["iteration"]),
            n_rollouts=config.rollouts_per_iteration,
            crash_speeds=list(line["crash_speeds"]),
            mean_task_speed=float(line["mean_task_speed"]),
            successes=list(line["successes"]),
            n_samples=int(line["n_samples"])))
    return records


def _run_single_entry(args):
    config_doc, tag, cost_doc, seed, run_dir = args
    config = config_from_dict(config_doc)
    cost_params = CostParams(**cost_doc)
    return _run_single(config, tag, cost_params, seed, Path(run_dir))


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1):
    """Run the full sweep; returns all MetricsRecords in (point, seed,
    iteration) order and writes metrics.csv, crash_summary.csv, and
    task_curve.csv under the output directory."""
    out = Path(out_dir if out_dir is not None else config.output_dir or "")
    if str(out) in ("", "."):
        raise ValueError("an output directory is required")
    out.mkdir(parents=True, exist_ok=True)

    resolved = config_to_yaml(config)
    resolved_path = out / "config_resolved.yaml"
    if resolved_path.exists():
        if resolved_path.read_text() != resolved:
            raise ValueError(f"{out} holds results for a different config; "
                             "use a fresh output directory")
    else:
        resolved_path.write_text(resolved)

    points = grid_points(config)
    tasks = []
    for tag, cp in points:
        for seed in config.seeds:
            tasks.append((tag, cp, seed, out / "runs" / f"{tag}__seed{seed}"))

    if jobs > 1:
        config_doc = asdict(config)
        payload = [(config_doc, tag, asdict(cp), seed, str(run_dir))
                   for tag, cp, seed, run_dir in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_single_entry, payload))
    else:
        results = [_run_single(config, tag, cp, seed, run_dir)
                   for tag, cp, seed, run_dir in tasks]

    records = [rec for run_records in results for rec in run_records]
    write_metrics_csv(out / "metrics.csv", records)
    write_crash_summary_csv(out / "crash_summary.csv",
                            crash_speed_summary(records, config.crash_speed_thresholds))
    write_task_curve_csv(out / "task_curve.csv", task_performance_curve(records))
    return records


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([
                r.point_tag, r.estimator_mode, _fmt(r.lambda_coll),
                _fmt(r.lambda_std), _fmt(r.lambda_const), r.seed, r.iteration,
                r.n_rollouts, len(r.crash_speeds),
                ";".join(_fmt(v) for v in r.crash_speeds),
                _fmt(r.mean_task_speed),
                ";".join("1" if s else "0" for s in r.successes),
                r.n_samples,
            ])


def read_metrics_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ValueError("unexpected metrics.csv columns")
        for row in reader:
            records.append(MetricsRecord(
                point_tag=row["point_tag"], estimator_mode=row["estimator_mode"],
                lambda_coll=float(row["lambda_coll"]),
                lambda_std=float(row["lambda_std"]),
                lambda_const=float(row["lambda_const"]),
                seed=int(row["seed"]), iteration=int(row["iteration"]),
                n_rollouts=int(row["n_rollouts"]),
                crash_speeds=[float(v) for v in row["crash_speeds"].split(";") if v],
                mean_task_speed=float(row["mean_task_speed"]),
                successes=[c == "1" for c in row["successes"].split(";") if c],
                n_samples=int(row["n_samples"])))
    return records


def crash_speed_summary(records, thresholds):
    """Per grid point: crashes at or above each threshold, totaled across
    iterations per seed, then averaged (and spread) over seeds."""
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    tags = _ordered_tags(records)
    rows = []
    for tag in tags:
        per_seed = {}
        for r in records:
            if r.point_tag == tag:
                per_seed.setdefault(r.seed, []).extend(r.crash_speeds)
        counts_by_seed = {
            seed: np.array([sum(1 for v in speeds if v >= t) for t in thresholds])
            for seed, speeds in per_seed.items()}
        stacked = np.stack(list(counts_by_seed.values()))
        means = stacked.mean(axis=0)
        stds = stacked.std(axis=0)
        for t, m, s in zip(thresholds, means, stds):
            rows.append({"point_tag": tag, "threshold": float(t),
                         "mean_crashes_at_or_above": float(m),
                         "std_crashes_at_or_above": float(s),
                         "n_seeds": stacked.shape[0]})
    return rows


def task_performance_curve(records):
    """Per (grid point, iteration): mean/std/min/max across seeds of the
    iteration's mean task-direction speed.  std uses the population divisor
    so a single seed reports zero spread."""
    tags = _ordered_tags(records)
    rows = []
    for tag in tags:
        by_iter = {}
        for r in records:
            if r.point_tag == tag:
                by_iter.setdefault(r.iteration, []).append(r.mean_task_speed)
        for it in sorted(by_iter):
            vals = np.array(by_iter[it], dtype=float)
            rows.append({"point_tag": tag, "iteration": it,
                         "mean_task_speed_mean": float(vals.mean()),
                         "mean_task_speed_std": float(vals.std()),
                         "mean_task_speed_min": float(vals.min()),
                         "mean_task_speed_max": float(vals.max())})
    return rows


def _ordered_tags(records):
    tags = []
    for r in records:
        if r.point_tag not in tags:
            tags.append(r.point_tag)
    return tags


def write_crash_summary_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CRASH_SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([row["point_tag"], _fmt(row["threshold"]),
                        _fmt(row["mean_crashes_at_or_above"]),
                        _fmt(row["std_crashes_at_or_above"]), row["n_seeds"]])


def write_task_curve_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TASK_CURVE_COLUMNS)
        for row in rows:
            w.writerow([row["point_tag"], row["iteration"],
                        _fmt(row["mean_task_speed_mean"]),
                        _fmt(row["mean_task_speed_std"]),
                        _fmt(row["mean_task_speed_min"]),
                        _fmt(row["mean_task_speed_max"])])
