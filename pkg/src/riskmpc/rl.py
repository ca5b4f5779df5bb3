"""Outer model-based RL loop: MPC rollouts, window labeling, aggregation, retrain.

Each iteration samples closed-loop rollouts with the current predictor,
slices them into (state, H-step controls, observation, collided-within-window)
samples, appends everything to the aggregated dataset, and bootstrap-retrains
the ensemble on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import CostParams
from .data import Dataset, LabeledSample
from .ensemble import BootstrapEnsemble, train
from .planner import ActionLibrary, mpc_select
from .sim import Environment, Observation, SimProfile, VehicleState, check_collision, render_camera, step


@dataclass
class Rollout:
    """One closed-loop episode. states has one more entry than controls."""

    states: list
    controls: list
    observations: list
    chosen_indices: list
    chosen_costs: list
    collided: bool
    crash_speed: float | None
    reason: str                      # "collision" | "max_steps" | "horizon"

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("need exactly one more state than controls")
        if self.collided != (self.crash_speed is not None):
            raise ValueError("crash_speed must be present iff collided")

    @property
    def n_steps(self) -> int:
        return len(self.controls)


@dataclass
class IterationMetrics:
    crash_speeds: list
    successes: list
    mean_task_speed: float
    n_samples: int
    final_train_loss: float = float("nan")


def rollout(env: Environment, policy, init_state: VehicleState, max_steps: int,
            profile: SimProfile) -> Rollout:
    """Run closed-loop until collision or max_steps.

    policy(state, observation, t) returns the control to execute, or a
    (control, chosen_index, chosen_cost) tuple, or None to stop early
    (termination reason "horizon").  The collision-time speed is the speed
    of the colliding state.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    states = [init_state]
    controls, observations, chosen_indices, chosen_costs = [], [], [], []
    if check_collision(init_state, env, profile.body_radius):
        return Rollout(states, controls, observations, chosen_indices, chosen_costs,
                       collided=True, crash_speed=init_state.speed, reason="collision")
    collided = False
    crash_speed = None
    reason = "max_steps"
    for t in range(max_steps):
        state = states[-1]
        obs = render_camera(state, env, profile.camera_width, profile.camera_height,
                            profile.fov, profile.max_depth)
        decision = policy(state, obs, t)
        if decision is None:
            reason = "horizon"
            break
        if isinstance(decision, tuple):
            u, idx, cost = decision
        else:
            u, idx, cost = decision, -1, float("nan")
        new_state = step(state, u, profile.delta_t, profile)
        states.append(new_state)
        controls.append(np.asarray(u, dtype=float))
        observations.append(obs)
        chosen_indices.append(int(idx))
        chosen_costs.append(float(cost))
        if check_collision(new_state, env, profile.body_radius):
            collided = True
            crash_speed = new_state.speed
            reason = "collision"
            break
    return Rollout(states, controls, observations, chosen_indices, chosen_costs,
                   collided=collided, crash_speed=crash_speed, reason=reason)


def extract_samples(rollout: Rollout, H: int):
    """Slice a rollout into labeled window samples.

    The sample at index t carries state/observation at t, the executed
    controls u_t..u_{t+H-1}, and label 1 iff the collision happened in the
    window (t, t+H].  For a collision-ended rollout every step index yields
    a sample, with the control tail padded by repeating the final executed
    control.  For rollouts ended by the step cap (or a stopping policy) the
    trailing windows whose outcome was never observed are dropped, so only
    t <= n_steps - H is kept.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    T = rollout.n_steps
    if T == 0:
        return []
    samples = []
    last = rollout.controls[-1]
    t_max = T - 1 if rollout.collided else T - H
    for t in range(0, t_max + 1):
        window = rollout.controls[t:min(t + H, T)]
        if len(window) < H:
            window = list(window) + [last] * (H - len(window))
        controls = np.concatenate([np.asarray(u, dtype=float) for u in window])
        # Collision, when present, sits at state index T.
        label = 1 if (rollout.collided and T <= t + H) else 0
        obs = rollout.observations[t]
        pixels = obs.pixels if isinstance(obs, Observation) else np.asarray(obs)
        samples.append(LabeledSample(
            state=rollout.states[t].as_vector(),
            controls=controls,
            # float32 round-trip keeps in-memory data identical to a
            # saved-and-reloaded dataset, so resumed runs replay exactly.
            observation=pixels.astype(np.float32).astype(float),
            label=label))
    return samples


def task_speed_values(rollout: Rollout, cost_profile: str):
    """Per-step task-direction speeds: forward velocity component for the
    quadrotor profile, speed magnitude for the car; the colliding step is
    excluded."""
    end = len(rollout.states) - 1 if rollout.collided else len(rollout.states)
    vals = []
    for s in rollout.states[1:end]:
        if cost_profile == "quadrotor":
            vals.append(float(s.velocity[0]))
        else:
            vals.append(s.speed)
    return vals


def make_mpc_policy(library: ActionLibrary, ensemble: BootstrapEnsemble,
                    cost_params: CostParams, profile: SimProfile,
                    step_seeds, allow_untrained: bool = False):
    """Policy closure over mpc_select; step t uses step_seeds[t]."""

    def policy(state, obs, t):
        action, idx, costs = mpc_select(state, obs, library, ensemble, cost_params,
                                        profile, seed=step_seeds[t],
                                        allow_untrained=allow_untrained)
        return action, idx, float(costs[idx])

    return policy


def run_iteration(env: Environment, ensemble: BootstrapEnsemble,
                  library: ActionLibrary, cost_params: CostParams,
                  dataset: Dataset, n_rollouts: int, init_state_sampler,
                  profile: SimProfile, seed, iteration: int, max_steps: int,
                  sgd_iters: int, batch_size: int = 32,
                  reset_models: bool = False):
    """One outer-loop iteration; mutates dataset and ensemble in place.

    Returns (metrics, rollouts).  init_state_sampler(rng, rollout_index)
    supplies start states.  seed (int or SeedSequence) drives everything:
    per-rollout and per-step child streams plus the retraining stream are
    spawned from it in a fixed order, so a rerun with the same seed is
    bit-identical.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(n_rollouts + 1)
    train_ss = children[-1]
    # An untrained ensemble may only drive the very first sampling pass,
    # before any data (demonstrations included) exists.
    allow_untrained = not ensemble.trained and len(dataset) == 0
    H = library.horizon
    rollouts = []
    all_samples = []
    crash_speeds, successes, speed_values = [], [], []
    for r in range(n_rollouts):
        sub = children[r].spawn(max_steps + 1)
        init_state = init_state_sampler(np.random.default_rng(sub[0]), r)
        policy = make_mpc_policy(library, ensemble, cost_params, profile,
                                 step_seeds=sub[1:], allow_untrained=allow_untrained)
        ro = rollout(env, policy, init_state, max_steps, profile)
        rollouts.append(ro)
        all_samples.extend(extract_samples(ro, H))
        successes.append(not ro.collided)
        if ro.collided:
            crash_speeds.append(ro.crash_speed)
        speed_values.extend(task_speed_values(ro, cost_params.profile))
    dataset.append(all_samples, iteration)
    final_loss = float("nan")
    if n_rollouts > 0 and len(dataset) > 0:
        _, loss_curves = train(ensemble, dataset, sgd_iters,
                               np.random.default_rng(train_ss),
                               batch_size=batch_size, reset_models=reset_models)
        final_loss = float(loss_curves[:, -1].mean()) if loss_curves.size else float("nan")
    mean_speed = float(np.mean(speed_values)) if speed_values else 0.0
    metrics = IterationMetrics(crash_speeds=crash_speeds, successes=successes,
                               mean_task_speed=mean_speed,
                               n_samples=len(all_samples),
                               final_train_loss=final_loss)
    return metrics, rollouts
