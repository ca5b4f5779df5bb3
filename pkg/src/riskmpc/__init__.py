"""Uncertainty-aware collision prediction and risk-averse MPC learning lab."""

from .cost import CostParams, collision_cost, task_cost, total_sequence_cost
from .data import Dataset, FeatureSpec, LabeledSample, load_dataset, make_features, save_dataset
from .ensemble import (BootstrapEnsemble, PredictionStats, const_penalty_prob,
                       load_ensemble, predict_stats, predict_stats_batch,
                       resample, risk_averse_prob, save_ensemble, train)
from .harness import (ExperimentConfig, MetricsRecord, config_from_yaml,
                      crash_speed_summary, default_config, grid_points,
                      run_experiment, task_performance_curve)
from .nn import (AdamState, DropoutMask, MlpParams, adam_step, forward,
                 init_adam_state, init_params, logistic, loss_and_gradient,
                 sample_dropout_mask)
from .planner import (ActionLibrary, build_car_library, build_quadrotor_library,
                      evaluate_sequence, mpc_select, select_min_cost)
from .rl import IterationMetrics, Rollout, extract_samples, rollout, run_iteration
from .sim import (Environment, Observation, SimProfile, VehicleState,
                  check_collision, load_environment, render_camera,
                  save_environment, step)

__version__ = "0.1.0"
