"""Task cost, velocity-dependent collision cost, and the combined MPC cost.

The collision term charges lambda_coll * ||vel||^2 scaled by the predicted
collision probability, so predicted (or uncertain) collisions are cheap at
low speed and expensive at high speed; stationary collisions are free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ESTIMATOR_MODES = ("risk_averse", "const_penalty", "plain")
PROFILES = ("quadrotor", "car")


@dataclass
class CostParams:
    lambda_coll: float = 1.0
    lambda_std: float = 0.0
    lambda_const: float = 0.0
    target_speed: float = 0.5
    estimator_mode: str = "risk_averse"
    profile: str = "quadrotor"
    # When True only the terminal state contributes task cost.
    task_cost_terminal_only: bool = False

    def __post_init__(self):
        if self.lambda_coll < 0 or self.lambda_std < 0 or self.lambda_const < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.target_speed <= 0:
            raise ValueError("target_speed must be positive")
        if self.estimator_mode not in ESTIMATOR_MODES:
            raise ValueError(f"unknown estimator_mode {self.estimator_mode!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown cost profile {self.profile!r}")


def task_cost(state, control, params: CostParams) -> float:
    """Squared deviation from the commanded cruise objective.

    quadrotor: ||v - (target_speed, 0)||^2 (directed forward flight).
    car: (||v|| - target_speed)^2 (desired speed in any direction).
    """
    v = np.asarray(state.velocity, dtype=float)
    if params.profile == "quadrotor":
        d = v - np.array([params.target_speed, 0.0])
        return float(d @ d)
    return float((np.hypot(v[0], v[1]) - params.target_speed) ** 2)


def collision_cost(velocity, lambda_coll: float) -> float:
    """lambda_coll * ||vel||^2."""
    if lambda_coll < 0:
        raise ValueError("lambda_coll must be nonnegative")
    v = np.asarray(velocity, dtype=float)
    return float(lambda_coll * (v @ v))


def total_sequence_cost(states, controls, p_coll: float, params: CostParams) -> float:
    """Summed task cost over the horizon plus the expected terminal collision cost.

    states must be the H+1 states produced by rolling the dynamics over the
    H controls.  The single any-step collision probability p_coll multiplies
    the collision cost of the terminal state's velocity.
    """
    if not 0.0 <= p_coll <= 1.0:
        raise ValueError(f"p_coll must be in [0, 1], got {p_coll}")
    if len(states) != len(controls) + 1:
        raise ValueError("expected exactly one more state than controls")
    if params.task_cost_terminal_only:
        task = task_cost(states[-1], None, params)
    else:
        task = sum(task_cost(s, None, params) for s in states)
    return task + p_coll * collision_cost(states[-1].velocity, params.lambda_coll)
