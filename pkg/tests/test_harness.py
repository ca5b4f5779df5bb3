import pytest

from riskmpc.data import load_dataset
from riskmpc.harness import (CRASH_SUMMARY_COLUMNS, METRICS_COLUMNS,
                             TASK_CURVE_COLUMNS, ExperimentConfig, MetricsRecord,
                             config_from_dict, config_from_yaml, config_to_yaml,
                             crash_speed_summary, default_config, grid_points,
                             read_metrics_csv, replay_rollout_log,
                             run_experiment, task_performance_curve)
from riskmpc import cli


def tiny_config(**overrides):
    base = dict(
        profile="quadrotor_sim", horizon=3, camera_width=4, camera_height=4,
        n_models=2, eval_dropout_passes=1, sgd_iters=8, n_iterations=2,
        rollouts_per_iteration=2, max_steps=4, lambda_coll=[5.0],
        lambda_std=[0.0], seeds=[0], crash_speed_thresholds=[0.0, 0.3])
    base.update(overrides)
    return config_from_dict(base)


def record(tag, seed, iteration, crash_speeds=(), mean_speed=0.4,
           successes=(True, True)):
    return MetricsRecord(point_tag=tag, estimator_mode="risk_averse",
                         lambda_coll=10.0, lambda_std=0.0, lambda_const=0.0,
                         seed=seed, iteration=iteration, n_rollouts=len(successes),
                         crash_speeds=list(crash_speeds),
                         mean_task_speed=mean_speed, successes=list(successes),
                         n_samples=10)


def test_profile_defaults_match_experimental_setups():
    quad = default_config("quadrotor_sim")
    assert (quad.horizon, quad.delta_t, quad.target_speed) == (6, 0.2, 0.5)
    assert (quad.n_iterations, quad.rollouts_per_iteration) == (20, 20)
    assert (quad.camera_width, quad.camera_height) == (16, 16)
    assert quad.n_models == 50 and quad.keep_prob == pytest.approx(0.8)
    car = default_config("car_sim")
    assert (car.horizon, car.delta_t, car.target_speed) == (4, 0.5, 1.2)
    assert (car.n_iterations, car.rollouts_per_iteration) == (10, 20)
    assert (car.camera_width, car.camera_height) == (32, 18)
    assert car.max_steps == 10
    assert car.n_models == 5 and car.keep_prob == pytest.approx(0.95)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        config_from_dict({"profile": "quadrotor_sim", "bogus_knob": 3})


def test_config_validation():
    with pytest.raises(ValueError):
        config_from_dict({"profile": "nope"})
    with pytest.raises(ValueError):
        config_from_dict({"profile": "quadrotor_sim", "seeds": [1, 1]})
    with pytest.raises(ValueError):
        config_from_dict({"profile": "quadrotor_sim", "lambda_coll": []})
    with pytest.raises(ValueError):
        config_from_dict({"profile": "quadrotor_sim",
                          "lambda_std": [0.0], "lambda_const": [0.0]})


def test_config_yaml_roundtrip(tmp_path):
    cfg = tiny_config(lambda_std=[0.0, 1.0], seeds=[3, 4])
    path = tmp_path / "cfg.yaml"
    path.write_text(config_to_yaml(cfg))
    back = config_from_yaml(path)
    assert back == cfg


def test_grid_points_modes():
    cfg = tiny_config(lambda_coll=[1.0, 10.0], lambda_std=[0.0, 1.0])
    pts = grid_points(cfg)
    assert [t for t, _ in pts] == ["coll1_std0", "coll1_std1",
                                   "coll10_std0", "coll10_std1"]
    assert all(p.estimator_mode == "risk_averse" for _, p in pts)

    cfg_c = tiny_config(lambda_std=None, lambda_const=[0.5])
    pts_c = grid_points(cfg_c)
    assert pts_c[0][0] == "coll5_const0.5"
    assert pts_c[0][1].estimator_mode == "const_penalty"

    cfg_p = tiny_config(lambda_std=None)
    assert grid_points(cfg_p)[0][1].estimator_mode == "plain"


def test_run_experiment_counting_contract(tmp_path):
    cfg = tiny_config(n_iterations=2, rollouts_per_iteration=3)
    records = run_experiment(cfg, out_dir=tmp_path / "out")
    assert len(records) == 2          # 1 point x 1 seed x 2 iterations
    assert all(r.n_rollouts == 3 for r in records)
    assert [r.iteration for r in records] == [0, 1]
    out = tmp_path / "out"
    assert (out / "metrics.csv").exists()
    assert (out / "crash_summary.csv").exists()
    assert (out / "task_curve.csv").exists()
    run_dir = out / "runs" / "coll5_std0__seed0"
    assert (run_dir / "checkpoint.npz").exists()
    assert (run_dir / "rollouts_iter001.npz").exists()


def test_run_experiment_rerun_is_byte_identical(tmp_path):
    cfg = tiny_config(seeds=[0, 1])
    run_experiment(cfg, out_dir=tmp_path / "a")
    run_experiment(cfg, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b


def test_run_experiment_resume_matches_uninterrupted(tmp_path):
    cfg3 = tiny_config(n_iterations=3)
    straight = run_experiment(cfg3, out_dir=tmp_path / "full")

    cfg2 = tiny_config(n_iterations=2)
    run_experiment(cfg2, out_dir=tmp_path / "steps")
    # resuming with more iterations continues from the checkpoint; the
    # resolved config changed, so refresh the stamp the way a user would
    (tmp_path / "steps" / "config_resolved.yaml").write_text(config_to_yaml(cfg3))
    resumed = run_experiment(cfg3, out_dir=tmp_path / "steps")

    assert len(straight) == len(resumed) == 3
    for a, b in zip(straight, resumed):
        assert a == b
    full_csv = (tmp_path / "full" / "metrics.csv").read_bytes()
    step_csv = (tmp_path / "steps" / "metrics.csv").read_bytes()
    assert full_csv == step_csv


def test_run_experiment_rejects_config_mismatch(tmp_path):
    cfg = tiny_config()
    run_experiment(cfg, out_dir=tmp_path / "out")
    other = tiny_config(lambda_std=[2.0])
    with pytest.raises(ValueError, match="different config"):
        run_experiment(other, out_dir=tmp_path / "out")


def test_seed_isolation_across_grid_composition(tmp_path):
    # a run's results do not depend on which other grid points run alongside
    joint = run_experiment(tiny_config(lambda_std=[0.0, 1.0]),
                           out_dir=tmp_path / "joint")
    solo0 = run_experiment(tiny_config(lambda_std=[0.0]),
                           out_dir=tmp_path / "solo0")
    solo1 = run_experiment(tiny_config(lambda_std=[1.0]),
                           out_dir=tmp_path / "solo1")
    joint0 = [r for r in joint if r.point_tag == "coll5_std0"]
    joint1 = [r for r in joint if r.point_tag == "coll5_std1"]
    assert joint0 == solo0
    assert joint1 == solo1
    # permuting the grid order leaves per-point results unchanged
    permuted = run_experiment(tiny_config(lambda_std=[1.0, 0.0]),
                              out_dir=tmp_path / "perm")
    assert [r for r in permuted if r.point_tag == "coll5_std0"] == joint0
    assert [r for r in permuted if r.point_tag == "coll5_std1"] == joint1


def test_metrics_csv_schema_and_roundtrip(tmp_path):
    cfg = tiny_config()
    records = run_experiment(cfg, out_dir=tmp_path / "out")
    path = tmp_path / "out" / "metrics.csv"
    header = path.read_text().splitlines()[0]
    assert header.split(",") == METRICS_COLUMNS
    back = read_metrics_csv(path)
    assert back == records
    crash_header = (tmp_path / "out" / "crash_summary.csv").read_text().splitlines()[0]
    assert crash_header.split(",") == CRASH_SUMMARY_COLUMNS
    curve_header = (tmp_path / "out" / "task_curve.csv").read_text().splitlines()[0]
    assert curve_header.split(",") == TASK_CURVE_COLUMNS


def test_crash_speed_summary_hand_tally():
    recs = [record("p", 0, 0, crash_speeds=[0.1, 0.3]),
            record("p", 0, 1, crash_speeds=[0.3])]
    rows = crash_speed_summary(recs, [0.0, 0.2, 0.4])
    counts = [r["mean_crashes_at_or_above"] for r in rows]
    assert counts == [3.0, 2.0, 0.0]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_crash_speed_summary_no_crashes():
    rows = crash_speed_summary([record("p", 0, 0)], [0.0, 0.5])
    assert [r["mean_crashes_at_or_above"] for r in rows] == [0.0, 0.0]


def test_crash_speed_summary_averages_over_seeds():
    recs = [record("p", 0, 0, crash_speeds=[0.5, 0.5]),
            record("p", 1, 0, crash_speeds=[0.5])]
    rows = crash_speed_summary(recs, [0.0])
    assert rows[0]["mean_crashes_at_or_above"] == pytest.approx(1.5)
    assert rows[0]["n_seeds"] == 2


def test_crash_speed_summary_rejects_unsorted_thresholds():
    with pytest.raises(ValueError):
        crash_speed_summary([record("p", 0, 0)], [0.4, 0.2])


def test_task_curve_single_seed_zero_std():
    recs = [record("p", 0, 0, mean_speed=0.4), record("p", 0, 1, mean_speed=0.5)]
    rows = task_performance_curve(recs)
    assert len(rows) == 2
    assert all(r["mean_task_speed_std"] == 0.0 for r in rows)


def test_task_curve_two_seed_mean():
    recs = [record("p", 0, 0, mean_speed=0.4), record("p", 1, 0, mean_speed=0.6)]
    rows = task_performance_curve(recs)
    assert rows[0]["mean_task_speed_mean"] == pytest.approx(0.5)
    assert rows[0]["mean_task_speed_min"] == pytest.approx(0.4)
    assert rows[0]["mean_task_speed_max"] == pytest.approx(0.6)


def test_task_curve_length_matches_iterations():
    recs = [record("p", 0, i) for i in range(5)]
    assert len(task_performance_curve(recs)) == 5


def test_replay_rollout_log_agrees_with_simulator(tmp_path):
    cfg = tiny_config()
    run_experiment(cfg, out_dir=tmp_path / "out")
    log = tmp_path / "out" / "runs" / "coll5_std0__seed0" / "rollouts_iter000.npz"
    reports = replay_rollout_log(log)
    assert len(reports) == cfg.rollouts_per_iteration
    for rep in reports:
        assert rep["max_state_deviation"] == 0.0
        assert rep["logged_collided"] == rep["replayed_collided"]


def test_cli_run_summarize_replay(tmp_path, capsys):
    cfg = tiny_config()
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(config_to_yaml(cfg))
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert cli.main(["summarize", "--metrics", str(out / "metrics.csv"),
                     "--thresholds", "0.0,0.3"]) == 0
    log = out / "runs" / "coll5_std0__seed0" / "rollouts_iter000.npz"
    assert cli.main(["replay", "--rollout-log", str(log)]) == 0
    text = capsys.readouterr().out
    assert "completed" in text and "max deviation" in text


def test_run_experiment_parallel_jobs_match_serial(tmp_path):
    cfg = tiny_config(seeds=[0, 1])
    serial = run_experiment(cfg, out_dir=tmp_path / "s", jobs=1)
    parallel = run_experiment(cfg, out_dir=tmp_path / "p", jobs=2)
    assert serial == parallel


def test_demonstration_preload(tmp_path):
    # build a demo dataset from one tiny run, then start a new experiment
    # from it: the ensemble trains on the demos before the first rollout
    cfg = tiny_config()
    run_experiment(cfg, out_dir=tmp_path / "demo_src")
    demo_file = tmp_path / "demo_src" / "runs" / "coll5_std0__seed0" / "dataset.npz"
    demo = load_dataset(demo_file)
    cfg2 = tiny_config(demonstrations=str(demo_file), n_iterations=1)
    records = run_experiment(cfg2, out_dir=tmp_path / "with_demo")
    assert len(records) == 1
    run_dir = tmp_path / "with_demo" / "runs" / "coll5_std0__seed0"
    final = load_dataset(run_dir / "dataset.npz")
    assert len(final) == len(demo) + records[0].n_samples
    assert final.iteration_tags[:len(demo)] == demo.iteration_tags
