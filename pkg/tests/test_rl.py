import math

import numpy as np
import pytest

from riskmpc.cost import CostParams
from riskmpc.data import Dataset, FeatureSpec, load_dataset, save_dataset
from riskmpc.ensemble import BootstrapEnsemble
from riskmpc.planner import build_quadrotor_library
from riskmpc.rl import (Rollout, extract_samples, rollout, run_iteration,
                        task_speed_values)
from riskmpc.sim import Environment, Observation, SimProfile, VehicleState

PROFILE = SimProfile(name="quadrotor", dynamics="velocity", delta_t=0.2,
                     body_radius=0.05, camera_width=4, camera_height=4,
                     fov=math.pi / 2, max_depth=3.0)


def make_rollout(n_steps, collided, controls=None):
    """Synthetic rollout with recognizable per-step contents."""
    states = [VehicleState(position=(0.1 * t, 0.0), velocity=(0.1 * t, 0.0))
              for t in range(n_steps + 1)]
    if controls is None:
        controls = [np.array([float(t), -float(t)]) for t in range(n_steps)]
    observations = [Observation(np.full(16, min(1.0, 0.01 * t)), 4, 4)
                    for t in range(n_steps)]
    return Rollout(states=states, controls=list(controls),
                   observations=observations,
                   chosen_indices=[0] * n_steps, chosen_costs=[0.0] * n_steps,
                   collided=collided,
                   crash_speed=states[-1].speed if collided else None,
                   reason="collision" if collided else "max_steps")


def test_extract_collision_free_rollout_drops_unobserved_tail():
    ro = make_rollout(10, collided=False)
    samples = extract_samples(ro, H=4)
    # only windows fully inside the rollout: t = 0..6
    assert len(samples) == 7
    assert all(s.label == 0 for s in samples)
    # controls are the executed ones, never padded
    np.testing.assert_array_equal(
        samples[6].controls, np.concatenate([ro.controls[t] for t in (6, 7, 8, 9)]))


def test_extract_collision_rollout_labels_last_window():
    ro = make_rollout(5, collided=True)
    samples = extract_samples(ro, H=4)
    assert len(samples) == 5                     # one per executed step
    labels = [s.label for s in samples]
    assert labels == [0, 1, 1, 1, 1]             # t in {1,2,3,4} inside (t, t+4]


def test_extract_padding_repeats_final_control():
    ro = make_rollout(5, collided=True)
    samples = extract_samples(ro, H=4)
    # t=4: only u_4 executed; padded with u_4 three more times
    last = ro.controls[-1]
    np.testing.assert_array_equal(samples[4].controls,
                                  np.concatenate([last, last, last, last]))
    # t=3: u_3, u_4, then u_4 twice
    np.testing.assert_array_equal(
        samples[3].controls,
        np.concatenate([ro.controls[3], last, last, last]))


def test_extract_h_equals_one_degenerates_to_next_step_indicator():
    ro = make_rollout(6, collided=True)
    samples = extract_samples(ro, H=1)
    assert [s.label for s in samples] == [0, 0, 0, 0, 0, 1]
    ro2 = make_rollout(6, collided=False)
    samples2 = extract_samples(ro2, H=1)
    assert len(samples2) == 6
    assert all(s.label == 0 for s in samples2)


def test_extract_zero_step_rollout_yields_nothing():
    s0 = VehicleState(position=(0, 0), velocity=(0.3, 0.0))
    ro = Rollout(states=[s0], controls=[], observations=[], chosen_indices=[],
                 chosen_costs=[], collided=True, crash_speed=s0.speed,
                 reason="collision")
    assert extract_samples(ro, H=4) == []


def brute_force_windows(ro, H):
    """Independent re-scan: labels from the stored collision position."""
    T = len(ro.controls)
    coll_at = T if ro.collided else None
    out = []
    ts = range(T) if ro.collided else range(T - H + 1)
    for t in ts:
        label = 0
        if coll_at is not None:
            for h in range(t + 1, t + H + 1):
                if h == coll_at:
                    label = 1
        out.append((t, label))
    return out


def test_extract_matches_brute_force_rescan_on_random_rollouts():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(1, 15))
        H = int(rng.integers(1, 7))
        collided = bool(rng.integers(0, 2))
        ro = make_rollout(T, collided=collided)
        samples = extract_samples(ro, H)
        expect = brute_force_windows(ro, H)
        assert len(samples) == len(expect)
        for s, (t, label) in zip(samples, expect):
            assert s.label == label
            np.testing.assert_array_equal(s.state, ro.states[t].as_vector())


def test_rollout_immediate_collision():
    env = Environment(circles=(((0.0, 0.0), 0.2),))
    s0 = VehicleState(position=(0.0, 0.0), velocity=(0.4, 0.0))
    ro = rollout(env, lambda s, o, t: np.zeros(2), s0, 10, PROFILE)
    assert ro.collided and ro.n_steps == 0
    assert ro.crash_speed == pytest.approx(0.4)
    assert ro.reason == "collision"


def test_rollout_empty_environment_runs_to_cap():
    env = Environment()
    s0 = VehicleState(position=(0.0, 0.0), velocity=(0.0, 0.0))
    ro = rollout(env, lambda s, o, t: np.array([0.5, 0.0]), s0, 7, PROFILE)
    assert not ro.collided
    assert ro.n_steps == 7
    assert ro.reason == "max_steps"
    assert ro.crash_speed is None


def test_rollout_policy_none_stops_with_horizon_reason():
    env = Environment()
    s0 = VehicleState(position=(0.0, 0.0), velocity=(0.0, 0.0))

    def policy(s, o, t):
        return np.array([0.3, 0.0]) if t < 3 else None

    ro = rollout(env, policy, s0, 10, PROFILE)
    assert ro.n_steps == 3 and ro.reason == "horizon" and not ro.collided


def test_rollout_collision_step_matches_time_to_contact():
    # constant velocity straight at a circle: contact when x >= 2 - (r + body)
    env = Environment(circles=(((2.0, 0.0), 0.2),))
    s0 = VehicleState(position=(0.0, 0.0), velocity=(0.0, 0.0))
    ro = rollout(env, lambda s, o, t: np.array([0.5, 0.0]), s0, 50, PROFILE)
    assert ro.collided
    t_contact = (2.0 - 0.25) / 0.5               # 3.5 s analytic
    t_sim = ro.n_steps * PROFILE.delta_t
    assert abs(t_sim - t_contact) <= PROFILE.delta_t
    assert ro.crash_speed == pytest.approx(0.5)


def test_rollout_records_consistent_lengths():
    env = Environment(circles=(((1.0, 0.0), 0.2),))
    s0 = VehicleState(position=(0.0, 0.0), velocity=(0.0, 0.0))
    ro = rollout(env, lambda s, o, t: np.array([0.5, 0.0]), s0, 30, PROFILE)
    assert len(ro.states) == ro.n_steps + 1
    assert len(ro.observations) == ro.n_steps
    assert len(ro.chosen_indices) == ro.n_steps


def test_task_speed_values_excludes_crash_step():
    ro = make_rollout(5, collided=True)
    vals = task_speed_values(ro, "quadrotor")
    # states 1..4 velocities (collision state 5 excluded)
    assert vals == pytest.approx([0.1, 0.2, 0.3, 0.4])
    ro2 = make_rollout(3, collided=False)
    assert len(task_speed_values(ro2, "quadrotor")) == 3


def small_setup(seed=0, n_models=2):
    env = Environment(circles=(((1.2, 0.0), 0.2),), bounds=(-1, -2, 4, 2))
    lib = build_quadrotor_library(3, 0.8)
    spec = FeatureSpec(state_dim=0, control_len=6, obs_len=16)
    ens = BootstrapEnsemble(spec, n_models, 0.8, 2, np.random.default_rng(seed),
                            hidden=(8, 8))
    params = CostParams(lambda_coll=5.0, lambda_std=1.0, target_speed=0.5,
                        profile="quadrotor")
    sampler = lambda rng, r: VehicleState(position=(0.0, rng.uniform(-0.5, 0.5)),
                                          velocity=(0.0, 0.0))
    return env, lib, ens, params, sampler


def test_run_iteration_zero_rollouts_is_noop():
    env, lib, ens, params, sampler = small_setup()
    dataset = Dataset()
    before = [m.copy() for m in ens.models]
    metrics, rollouts = run_iteration(env, ens, lib, params, dataset, 0, sampler,
                                      PROFILE, seed=0, iteration=0, max_steps=5,
                                      sgd_iters=10)
    assert len(dataset) == 0 and rollouts == []
    assert not ens.trained
    for a, b in zip(before, ens.models):
        for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
            np.testing.assert_array_equal(wa, wb)


def test_run_iteration_dataset_bookkeeping():
    env, lib, ens, params, sampler = small_setup()
    dataset = Dataset()
    metrics, rollouts = run_iteration(env, ens, lib, params, dataset, 3, sampler,
                                      PROFILE, seed=1, iteration=0, max_steps=6,
                                      sgd_iters=15)
    per_rollout = [len(extract_samples(ro, lib.horizon)) for ro in rollouts]
    assert len(dataset) == sum(per_rollout)
    assert metrics.n_samples == len(dataset)
    assert ens.trained
    assert set(dataset.iteration_tags) == {0}
    assert len(metrics.successes) == 3

    n_before = len(dataset)
    run_iteration(env, ens, lib, params, dataset, 3, sampler, PROFILE, seed=2,
                  iteration=1, max_steps=6, sgd_iters=15)
    assert len(dataset) >= n_before          # aggregation only grows


def test_run_iteration_deterministic_replay():
    def run():
        env, lib, ens, params, sampler = small_setup(seed=5)
        dataset = Dataset()
        stream = []
        for i in range(2):
            metrics, _ = run_iteration(env, ens, lib, params, dataset, 3, sampler,
                                       PROFILE, seed=100 + i, iteration=i,
                                       max_steps=6, sgd_iters=20)
            stream.append((tuple(metrics.crash_speeds), metrics.mean_task_speed,
                           tuple(metrics.successes), metrics.n_samples))
        return stream

    assert run() == run()


def test_dataset_roundtrip(tmp_path):
    env, lib, ens, params, sampler = small_setup()
    dataset = Dataset()
    run_iteration(env, ens, lib, params, dataset, 2, sampler, PROFILE, seed=3,
                  iteration=0, max_steps=5, sgd_iters=5)
    path = tmp_path / "data.npz"
    save_dataset(path, dataset)
    back = load_dataset(path)
    assert len(back) == len(dataset)
    assert back.iteration_tags == dataset.iteration_tags
    for a, b in zip(back.samples, dataset.samples):
        np.testing.assert_array_equal(a.state, b.state)
        np.testing.assert_array_equal(a.controls, b.controls)
        np.testing.assert_array_equal(a.observation, b.observation)
        assert a.label == b.label
