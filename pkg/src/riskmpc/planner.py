"""Receding-horizon selection over a fixed library of candidate action sequences.

Every planning step scores each candidate sequence: the known dynamics are
rolled forward for the task term, the collision predictor is queried once
per candidate on (state, sequence, observation), and the first action of
the cheapest sequence is returned.  Ties break to the lowest library index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .cost import CostParams, task_cost, total_sequence_cost
from .ensemble import (BootstrapEnsemble, PredictionStats, const_penalty_prob,
                       predict_stats, predict_stats_batch, risk_averse_prob)
from .sim import SimProfile, VehicleState, step

QUADROTOR_LIBRARY_SIZE = 190
CAR_LIBRARY_SIZE = 49


@dataclass
class ActionLibrary:
    """Fixed candidate control sequences, shape (n_sequences, H, control_dim)."""

    sequences: np.ndarray
    profile: str

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=float)
        if self.sequences.ndim != 3:
            raise ValueError("sequences must have shape (n, H, control_dim)")

    def __len__(self):
        return self.sequences.shape[0]

    @property
    def horizon(self) -> int:
        return self.sequences.shape[1]


def build_quadrotor_library(H: int, max_speed: float) -> ActionLibrary:
    """190 straight constant-velocity sequences: 19 headings x 10 speeds.

    Headings span +-90 degrees about forward; speeds are uniform on
    (0, max_speed].  Ordering is heading-major, slowest speed first.
    """
    if H < 1 or max_speed <= 0:
        raise ValueError("need H >= 1 and max_speed > 0")
    angles = np.linspace(-np.pi / 2, np.pi / 2, 19)
    speeds = np.linspace(max_speed / 10, max_speed, 10)
    seqs = np.empty((19 * 10, H, 2))
    i = 0
    for a in angles:
        for s in speeds:
            v = np.array([s * np.cos(a), s * np.sin(a)])
            seqs[i] = np.tile(v, (H, 1))
            i += 1
    return ActionLibrary(seqs, "quadrotor")


def build_car_library(H: int, max_speed: float, max_steer: float) -> ActionLibrary:
    """49 constant (speed, steering) sequences: 7 steering angles x 7 speeds.

    Steering angles are uniform on [-max_steer, max_steer] (the middle one is
    exactly straight); speeds are uniform on (0, max_speed].
    """
    if H < 1 or max_speed <= 0 or max_steer <= 0:
        raise ValueError("need H >= 1, max_speed > 0, max_steer > 0")
    steers = np.linspace(-max_steer, max_steer, 7)
    speeds = np.linspace(max_speed / 7, max_speed, 7)
    seqs = np.empty((49, H, 2))
    i = 0
    for st in steers:
        for sp in speeds:
            seqs[i] = np.tile(np.array([sp, st]), (H, 1))
            i += 1
    return ActionLibrary(seqs, "car")


def roll_sequence(state: VehicleState, seq, profile: SimProfile):
    """States produced by executing seq from state: H controls -> H+1 states."""
    states = [state]
    for u in np.asarray(seq, dtype=float):
        states.append(step(states[-1], u, profile.delta_t, profile))
    return states


def collision_probability(stats: PredictionStats, params: CostParams) -> float:
    if params.estimator_mode == "risk_averse":
        return risk_averse_prob(stats, params.lambda_std)
    if params.estimator_mode == "const_penalty":
        return const_penalty_prob(stats, params.lambda_const)
    return nn.logistic(stats.mean)


def _probs_from_arrays(means, stds, params: CostParams):
    if params.estimator_mode == "risk_averse":
        return nn.logistic(means + params.lambda_std * stds)
    if params.estimator_mode == "const_penalty":
        return nn.logistic(means + params.lambda_const)
    return nn.logistic(means)


def evaluate_sequence(state: VehicleState, observation, seq,
                      ensemble: BootstrapEnsemble, cost_params: CostParams,
                      profile: SimProfile, rng: np.random.Generator,
                      stats: PredictionStats | None = None,
                      allow_untrained: bool = False) -> float:
    """Risk-adjusted cost of one candidate sequence.

    Rolls the known dynamics for the task term, queries the predictor once
    on (state, seq, observation), and combines via the configured estimator.
    stats may be supplied to bypass the predictor (used in tests).
    """
    states = roll_sequence(state, seq, profile)
    if stats is None:
        stats = predict_stats(ensemble, state, seq,
                              observation.pixels if hasattr(observation, "pixels")
                              else observation,
                              rng, allow_untrained=allow_untrained)
    p = collision_probability(stats, cost_params)
    return total_sequence_cost(states, np.asarray(seq), p, cost_params)


def _library_cost_components(state: VehicleState, library: ActionLibrary,
                             cost_params: CostParams, profile: SimProfile):
    """(task_vec, terminal_speed_sq_vec) for every candidate, vectorized.

    Valid because both task-cost profiles depend only on velocities, and the
    velocity trajectory is a pure function of the commands under both
    dynamics models (commanded planar velocity / commanded speed).
    """
    seqs = library.sequences
    if profile.dynamics == "velocity" and cost_params.profile == "quadrotor":
        target = np.array([cost_params.target_speed, 0.0])
        diff = seqs - target
        per_step = (diff ** 2).sum(axis=2)            # (n, H)
        term_sq = (seqs[:, -1, :] ** 2).sum(axis=1)
    elif profile.dynamics == "unicycle" and cost_params.profile == "car":
        speeds = np.abs(seqs[:, :, 0])
        per_step = (speeds - cost_params.target_speed) ** 2
        term_sq = speeds[:, -1] ** 2
    else:
        # Uncommon pairing: fall back to explicit per-candidate rollouts.
        task = np.empty(len(library))
        term_sq = np.empty(len(library))
        for i in range(len(library)):
            states = roll_sequence(state, seqs[i], profile)
            if cost_params.task_cost_terminal_only:
                task[i] = task_cost(states[-1], None, cost_params)
            else:
                task[i] = sum(task_cost(s, None, cost_params) for s in states)
            v = states[-1].velocity
            term_sq[i] = float(v @ v)
        return task, term_sq
    if cost_params.task_cost_terminal_only:
        task = per_step[:, -1]
    else:
        task = per_step.sum(axis=1) + task_cost(state, None, cost_params)
    return task, term_sq


def select_min_cost(costs) -> int:
    """Index of the minimum cost; ties resolve to the lowest index."""
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("cost vector is empty")
    return int(np.argmin(costs))


def mpc_select(state: VehicleState, observation, library: ActionLibrary,
               ensemble: BootstrapEnsemble, cost_params: CostParams,
               profile: SimProfile, seed, estimator=None,
               allow_untrained: bool = False):
    """Score every candidate and return (first action, chosen index, costs).

    seed is an int or SeedSequence; per-candidate dropout streams are its
    spawned children, so the scores do not depend on evaluation order.
    estimator, when given, replaces the ensemble query; it must map
    (state, sequences, observation, seed) to (means, stds) arrays.
    """
    if len(library) == 0:
        raise ValueError("action library is empty")
    obs_vec = observation.pixels if hasattr(observation, "pixels") else observation
    if estimator is not None:
        means, stds = estimator(state, library.sequences, obs_vec, seed)
        means = np.asarray(means, dtype=float)
        stds = np.asarray(stds, dtype=float)
    else:
        means, stds = predict_stats_batch(ensemble, state, library.sequences,
                                          obs_vec, seed,
                                          allow_untrained=allow_untrained)
    probs = _probs_from_arrays(means, stds, cost_params)
    task, term_sq = _library_cost_components(state, library, cost_params, profile)
    costs = task + probs * cost_params.lambda_coll * term_sq
    idx = select_min_cost(costs)
    return library.sequences[idx, 0].copy(), idx, costs
