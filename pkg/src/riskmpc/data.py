"""Labeled training tuples and the append-only aggregated dataset.

A sample pairs the vehicle state, the H-step control sequence that was (or
would be) executed from it, and the camera observation with a binary
collision-within-window label.  The predictor consumes a flat feature
vector built from these pieces; by default the raw state is excluded so the
model works from the observation and commands alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureSpec:
    """Dimensions of the predictor input vector.

    state_dim is 0 when the raw state is excluded from the features.
    """

    state_dim: int
    control_len: int      # H * control_dim, flattened
    obs_len: int

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.control_len + self.obs_len


@dataclass
class LabeledSample:
    state: np.ndarray          # raw state vector (kept even when not featurized)
    controls: np.ndarray       # flattened control sequence, length H * control_dim
    observation: np.ndarray    # flattened grayscale pixels
    label: int                 # 1 iff a collision occurs within the window

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float).ravel()
        self.controls = np.asarray(self.controls, dtype=float).ravel()
        self.observation = np.asarray(self.observation, dtype=float).ravel()
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def make_features(spec: FeatureSpec, state, controls, observation) -> np.ndarray:
    """Concatenate (optionally state,) controls, observation into one vector."""
    controls = np.asarray(controls, dtype=float).ravel()
    observation = np.asarray(observation, dtype=float).ravel()
    if controls.shape[0] != spec.control_len:
        raise ValueError(
            f"control sequence length {controls.shape[0]}, expected {spec.control_len}")
    if observation.shape[0] != spec.obs_len:
        raise ValueError(
            f"observation length {observation.shape[0]}, expected {spec.obs_len}")
    if spec.state_dim == 0:
        return np.concatenate([controls, observation])
    state = np.asarray(state, dtype=float).ravel()
    if state.shape[0] != spec.state_dim:
        raise ValueError(f"state length {state.shape[0]}, expected {spec.state_dim}")
    return np.concatenate([state, controls, observation])


class Dataset:
    """Append-only collection of LabeledSample with per-iteration provenance."""

    def __init__(self):
        self.samples: list[LabeledSample] = []
        self.iteration_tags: list[int] = []

    def __len__(self):
        return len(self.samples)

    def append(self, samples, iteration: int):
        for s in samples:
            self.samples.append(s)
            self.iteration_tags.append(iteration)

    def feature_matrix(self, spec: FeatureSpec):
        """Returns (X, y) arrays; X rows follow insertion order."""
        if not self.samples:
            raise ValueError("dataset is empty")
        X = np.stack([make_features(spec, s.state, s.controls, s.observation)
                      for s in self.samples])
        y = np.array([s.label for s in self.samples], dtype=float)
        return X, y

    def label_counts(self):
        y = np.array([s.label for s in self.samples], dtype=int)
        return int((y == 0).sum()), int((y == 1).sum())


def save_dataset(path, dataset: Dataset):
    """Versioned npz record file; observations stored as float32."""
    if len(dataset) == 0:
        states = controls = obs = np.zeros((0,))
        labels = tags = np.zeros((0,), dtype=np.int64)
    else:
        states = np.stack([s.state for s in dataset.samples])
        controls = np.stack([s.controls for s in dataset.samples])
        obs = np.stack([s.observation for s in dataset.samples]).astype(np.float32)
        labels = np.array([s.label for s in dataset.samples], dtype=np.int64)
        tags = np.array(dataset.iteration_tags, dtype=np.int64)
    np.savez_compressed(path, format_version=DATASET_FORMAT_VERSION,
                        states=states, controls=controls, observations=obs,
                        labels=labels, iteration_tags=tags)


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version {version}")
        ds = Dataset()
        n = z["labels"].shape[0]
        for i in range(n):
            ds.samples.append(LabeledSample(
                state=z["states"][i],
                controls=z["controls"][i],
                observation=z["observations"][i].astype(float),
                label=int(z["labels"][i])))
            ds.iteration_tags.append(int(z["iteration_tags"][i]))
    return ds
