"""Bootstrap ensemble of dropout networks and the risk-averse estimator.

B networks are each trained on their own with-replacement resample of the
aggregated dataset, sampling a fresh dropout mask at every SGD pass.  A
prediction query runs eval_dropout_passes stochastic forward passes per
network and pools all B*D outputs into a sample mean and standard
deviation of the output pre-activation; the risk-averse collision
probability is the logistic of mean + lambda_std * std.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset, FeatureSpec, make_features

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class PredictionStats:
    """Pooled sample statistics of the network output pre-activation."""

    mean: float
    std: float
    sample_count: int

    def __post_init__(self):
        if self.std < 0 or self.sample_count < 1:
            raise ValueError("std must be >= 0 and sample_count >= 1")


class BootstrapEnsemble:
    """Population of B identically shaped networks with shared dropout config."""

    def __init__(self, feature_spec: FeatureSpec, n_models: int, keep_prob: float,
                 eval_dropout_passes: int, rng: np.random.Generator,
                 hidden=nn.DEFAULT_HIDDEN, lr: float = 1e-3):
        if n_models < 1:
            raise ValueError("need at least one model")
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if eval_dropout_passes < 1:
            raise ValueError("eval_dropout_passes must be >= 1")
        self.feature_spec = feature_spec
        self.keep_prob = float(keep_prob)
        self.eval_dropout_passes = int(eval_dropout_passes)
        self.hidden = tuple(hidden)
        self.lr = float(lr)
        self.models = [nn.init_params(rng, feature_spec.input_dim, self.hidden)
                       for _ in range(n_models)]
        self.adam_states = [nn.init_adam_state(m, lr=lr) for m in self.models]
        self.trained = False
        self.train_rounds = 0

    @property
    def n_models(self) -> int:
        return len(self.models)

    def sample_count(self) -> int:
        return self.n_models * self.eval_dropout_passes


def resample(dataset, rng: np.random.Generator):
    """With-replacement bootstrap resample; output size equals input size."""
    items = dataset.samples if isinstance(dataset, Dataset) else list(dataset)
    if len(items) == 0:
        raise ValueError("cannot resample an empty dataset")
    idx = rng.integers(0, len(items), size=len(items))
    return [items[i] for i in idx]


def _dataset_arrays(ensemble: BootstrapEnsemble, dataset):
    if isinstance(dataset, Dataset):
        return dataset.feature_matrix(ensemble.feature_spec)
    items = list(dataset)
    if not items:
        raise ValueError("dataset is empty")
    spec = ensemble.feature_spec
    X = np.stack([make_features(spec, s.state, s.controls, s.observation)
                  for s in items])
    y = np.array([s.label for s in items], dtype=float)
    return X, y


def train(ensemble: BootstrapEnsemble, dataset, sgd_iters: int,
          rng: np.random.Generator, batch_size: int = 32,
          reset_models: bool = False):
    """Bootstrap-retrain every model in place; returns (ensemble, loss_curves).

    Each model draws its own with-replacement resample of the dataset, then
    runs sgd_iters minibatch updates with fresh per-example dropout masks at
    every pass.  By default models warm-start from their current weights;
    reset_models=True reinitializes parameters and optimizer state first.
    """
    X, y = _dataset_arrays(ensemble, dataset)
    loss_curves = train_on_arrays(ensemble, X, y, sgd_iters, rng,
                                  batch_size=batch_size, reset_models=reset_models)
    return ensemble, loss_curves


def train_on_arrays(ensemble: BootstrapEnsemble, X: np.ndarray, y: np.ndarray,
                    sgd_iters: int, rng: np.random.Generator,
                    batch_size: int = 32, reset_models: bool = False):
    n = X.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    widths = ensemble.hidden
    kp = ensemble.keep_prob
    loss_curves = np.zeros((ensemble.n_models, sgd_iters))
    for b in range(ensemble.n_models):
        if reset_models:
            ensemble.models[b] = nn.init_params(rng, ensemble.feature_spec.input_dim,
                                                widths)
            ensemble.adam_states[b] = nn.init_adam_state(ensemble.models[b],
                                                         lr=ensemble.lr)
        boot = rng.integers(0, n, size=n)
        Xb, yb = X[boot], y[boot]
        params, adam = ensemble.models[b], ensemble.adam_states[b]
        for it in range(sgd_iters):
            mb = rng.integers(0, n, size=batch_size)
            if kp < 1.0:
                layer_masks = [(rng.random((batch_size, w)) < kp).astype(float)
                               for w in widths]
            else:
                layer_masks = [np.ones((batch_size, w)) for w in widths]
            loss, grads = nn.loss_and_gradient_stacked(params, Xb[mb], yb[mb],
                                                       layer_masks, kp)
            params, adam = nn.adam_step(adam, params, grads)
            loss_curves[b, it] = loss
        ensemble.models[b] = params
        ensemble.adam_states[b] = adam
    ensemble.trained = True
    ensemble.train_rounds += 1
    return loss_curves


def _draw_eval_masks(rng: np.random.Generator, n_models: int, n_passes: int,
                     widths, keep_prob: float):
    """All dropout masks for one query, drawn in a single call.

    Shape (n_models, n_passes, total_hidden); split per layer by the caller.
    """
    total = sum(widths)
    u = rng.random((n_models, n_passes, total))
    return (u < keep_prob).astype(float)


def _pre_activation_samples(ensemble: BootstrapEnsemble, X: np.ndarray,
                            keep: np.ndarray):
    """Stochastic outputs for every (row of X) x model x dropout pass.

    keep has shape (n_rows, B, D, total_hidden) and holds that row's masks.
    Returns array of shape (n_rows, B*D).
    """
    widths = ensemble.hidden
    inv = 1.0 / ensemble.keep_prob
    n = X.shape[0]
    B, D = ensemble.n_models, ensemble.eval_dropout_passes
    offsets = np.cumsum((0,) + widths)
    out = np.empty((n, B, D))
    for b, params in enumerate(ensemble.models):
        a_pre = X @ params.weights[0] + params.biases[0]
        h_first = np.maximum(a_pre, 0.0)
        for d in range(D):
            a = h_first * keep[:, b, d, offsets[0]:offsets[1]] * inv
            for k in range(1, len(widths)):
                z = a @ params.weights[k] + params.biases[k]
                a = np.maximum(z, 0.0) * keep[:, b, d, offsets[k]:offsets[k + 1]] * inv
            out[:, b, d] = (a @ params.weights[-1] + params.biases[-1])[:, 0]
    return out.reshape(n, B * D)


def _require_ready(ensemble: BootstrapEnsemble, allow_untrained: bool):
    if not ensemble.trained and not allow_untrained:
        raise ValueError("ensemble has not been trained; predictions are invalid")


def _population_std(samples: np.ndarray) -> np.ndarray:
    """Row-wise std with divisor N; exactly zero when all entries agree."""
    constant = samples.max(axis=1) == samples.min(axis=1)
    return np.where(constant, 0.0, samples.std(axis=1))


def predict_stats(ensemble: BootstrapEnsemble, state, control_seq, observation,
                  rng: np.random.Generator,
                  allow_untrained: bool = False) -> PredictionStats:
    """Pooled mean/std of the output pre-activation over B*D stochastic passes.

    The std uses the population divisor (N = B*D), so a single-sample
    configuration reports exactly zero spread.
    """
    _require_ready(ensemble, allow_untrained)
    x = make_features(ensemble.feature_spec, state, control_seq, observation)
    keep = _draw_eval_masks(rng, ensemble.n_models, ensemble.eval_dropout_passes,
                            ensemble.hidden, ensemble.keep_prob)
    samples = _pre_activation_samples(ensemble, x[None, :], keep[None, ...])[0]
    return PredictionStats(mean=float(samples.mean()),
                           std=_population_std(samples[None, :])[0],
                           sample_count=samples.size)


def predict_stats_batch(ensemble: BootstrapEnsemble, state, control_seqs,
                        observation, seed, allow_untrained: bool = False):
    """Vectorized predict_stats over many candidate control sequences.

    seed is an int or SeedSequence; candidate i uses the i-th spawned child
    stream, so the result equals calling predict_stats per candidate with
    those same child streams regardless of evaluation order.
    Returns (means, stds) arrays.
    """
    _require_ready(ensemble, allow_untrained)
    seqs = [np.asarray(s, dtype=float) for s in control_seqs]
    spec = ensemble.feature_spec
    X = np.stack([make_features(spec, state, s, observation) for s in seqs])
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(seqs))
    B, D = ensemble.n_models, ensemble.eval_dropout_passes
    total = sum(ensemble.hidden)
    keep = np.empty((len(seqs), B, D, total))
    for i, child in enumerate(children):
        u = np.random.default_rng(child).random((B, D, total))
        keep[i] = u < ensemble.keep_prob
    samples = _pre_activation_samples(ensemble, X, keep)
    return samples.mean(axis=1), _population_std(samples)


def risk_averse_prob(stats: PredictionStats, lambda_std: float) -> float:
    """logistic(mean + lambda_std * std); lambda_std = 0 is the plain estimator."""
    if lambda_std < 0:
        raise ValueError("lambda_std must be nonnegative")
    return nn.logistic(stats.mean + lambda_std * stats.std)


def const_penalty_prob(stats: PredictionStats, lambda_const: float) -> float:
    """logistic(mean + lambda_const): conservative baseline with a fixed shift."""
    if lambda_const < 0:
        raise ValueError("lambda_const must be nonnegative")
    return nn.logistic(stats.mean + lambda_const)


def save_ensemble(path, ensemble: BootstrapEnsemble):
    """Versioned npz checkpoint; layout documented in the README."""
    arrays = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "n_models": ensemble.n_models,
        "keep_prob": ensemble.keep_prob,
        "eval_dropout_passes": ensemble.eval_dropout_passes,
        "hidden": np.array(ensemble.hidden, dtype=np.int64),
        "lr": ensemble.lr,
        "trained": int(ensemble.trained),
        "train_rounds": ensemble.train_rounds,
        "feature_dims": np.array([ensemble.feature_spec.state_dim,
                                  ensemble.feature_spec.control_len,
                                  ensemble.feature_spec.obs_len], dtype=np.int64),
    }
    for b, (params, adam) in enumerate(zip(ensemble.models, ensemble.adam_states)):
        for k, (w, bias) in enumerate(zip(params.weights, params.biases)):
            arrays[f"model{b}_w{k}"] = w
            arrays[f"model{b}_b{k}"] = bias
        for j, (m, v) in enumerate(zip(adam.m, adam.v)):
            arrays[f"model{b}_adam_m{j}"] = m
            arrays[f"model{b}_adam_v{j}"] = v
        arrays[f"model{b}_adam_step"] = adam.step
    np.savez_compressed(path, **arrays)


def load_ensemble(path) -> BootstrapEnsemble:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        sd, cl, ol = (int(v) for v in z["feature_dims"])
        spec = FeatureSpec(state_dim=sd, control_len=cl, obs_len=ol)
        ens = BootstrapEnsemble(spec, int(z["n_models"]), float(z["keep_prob"]),
                                int(z["eval_dropout_passes"]),
                                rng=np.random.default_rng(0),
                                hidden=tuple(int(h) for h in z["hidden"]),
                                lr=float(z["lr"]))
        n_layers = len(ens.hidden) + 1
        for b in range(ens.n_models):
            weights = [z[f"model{b}_w{k}"] for k in range(n_layers)]
            biases = [z[f"model{b}_b{k}"] for k in range(n_layers)]
            ens.models[b] = nn.MlpParams(weights, biases)
            adam = nn.init_adam_state(ens.models[b], lr=ens.lr)
            adam.m = [z[f"model{b}_adam_m{j}"] for j in range(2 * n_layers)]
            adam.v = [z[f"model{b}_adam_v{j}"] for j in range(2 * n_layers)]
            adam.step = int(z[f"model{b}_adam_step"])
            ens.adam_states[b] = adam
        ens.trained = bool(int(z["trained"]))
        ens.train_rounds = int(z["train_rounds"])
    return ens
