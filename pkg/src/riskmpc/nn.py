"""Small fully connected network with manual backprop, dropout, and Adam.

The network is the collision predictor backbone: two ReLU hidden layers of
width 40 and a single linear output unit whose pre-activation feeds a
sigmoid.  Everything is plain numpy and purely functional: parameters,
dropout masks, and optimizer state are explicit values, so concurrent
training loops just need their own copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_HIDDEN = (40, 40)


@dataclass
class MlpParams:
    """Dense layer weights/biases. weights[k] has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def check_consistent(self):
        for k in range(len(self.weights) - 1):
            if self.weights[k].shape[1] != self.weights[k + 1].shape[0]:
                raise ValueError(
                    f"layer {k} output width {self.weights[k].shape[1]} does not "
                    f"match layer {k + 1} input width {self.weights[k + 1].shape[0]}")
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("bias shape does not match weight fan-out")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have width 1")


@dataclass
class DropoutMask:
    """Per-hidden-unit keep flags (0/1 floats), one block per hidden layer.

    Stores the keep probability (1 - drop probability); surviving activations
    are scaled by 1/keep_prob so the activation expectation is preserved on
    every stochastic pass (inverted dropout).
    """

    masks: list[np.ndarray]
    keep_prob: float


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# Clamp applied to sigmoid outputs before the log in the cross-entropy loss.
PROB_CLAMP = 1e-7


def init_params(rng: np.random.Generator, input_dim: int,
                hidden: tuple[int, ...] = DEFAULT_HIDDEN) -> MlpParams:
    """Glorot-uniform init: weights ~ U(+-sqrt(6/(fan_in+fan_out))), zero biases."""
    dims = [input_dim, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def init_adam_state(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = lambda arrs: [np.zeros_like(a) for a in arrs]
    return AdamState(m=zeros(params.weights) + zeros(params.biases),
                     v=zeros(params.weights) + zeros(params.biases),
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def logistic(y):
    """Numerically stable 1/(1+exp(-y)); accepts scalars or arrays."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return float(out) if out.ndim == 0 else out


def sample_dropout_mask(rng: np.random.Generator, keep_prob: float,
                        layer_widths: tuple[int, ...]) -> DropoutMask:
    """Independent Bernoulli(keep_prob) keep flag per hidden unit."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    masks = [(rng.random(w) < keep_prob).astype(float) for w in layer_widths]
    return DropoutMask(masks, keep_prob)


def all_keep_mask(layer_widths: tuple[int, ...]) -> DropoutMask:
    return DropoutMask([np.ones(w) for w in layer_widths], 1.0)


def _check_mask(params: MlpParams, mask: DropoutMask):
    widths = params.hidden_widths
    if len(mask.masks) != len(widths):
        raise ValueError("mask block count does not match hidden layer count")
    for m, w in zip(mask.masks, widths):
        if m.shape != (w,):
            raise ValueError(f"mask shape {m.shape} does not match hidden width {w}")


def forward(params: MlpParams, x: np.ndarray, mask: DropoutMask):
    """Forward pass on one input vector.

    Returns (f, cache): the scalar output pre-activation and the
    intermediate activations needed for a backward pass.  Hidden units are
    zeroed by the mask and survivors are scaled by 1/keep_prob.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (params.input_dim,):
        raise ValueError(f"input shape {x.shape}, expected ({params.input_dim},)")
    _check_mask(params, mask)
    layer_masks = [m[None, :] for m in mask.masks]
    f, cache = _forward_stacked(params, x[None, :], layer_masks, mask.keep_prob)
    return float(f[0]), cache


def _forward_stacked(params: MlpParams, X: np.ndarray, layer_masks, keep_prob: float):
    """Batched forward. layer_masks[k] has shape (n, width_k)."""
    inv = 1.0 / keep_prob
    acts = [X]          # post-dropout activations entering each layer
    pre = []            # pre-activations of hidden layers
    a = X
    for k in range(len(params.weights) - 1):
        z = a @ params.weights[k] + params.biases[k]
        h = np.maximum(z, 0.0)
        a = h * layer_masks[k] * inv
        pre.append(z)
        acts.append(a)
    f = (a @ params.weights[-1] + params.biases[-1])[:, 0]
    return f, {"pre": pre, "acts": acts, "masks": layer_masks, "keep_prob": keep_prob}


def loss_and_gradient(params: MlpParams, batch, masks):
    """Mean binary cross-entropy over a batch, with exact gradients.

    Args:
        batch: sequence of (input vector, label in {0, 1}).
        masks: one DropoutMask per example.

    The sigmoid outputs are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before
    the log; the returned gradients are the exact partial derivatives of the
    clamped loss (zero where the clamp is active).
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    if len(masks) != len(batch):
        raise ValueError("need one dropout mask per example")
    X = np.stack([np.asarray(x, dtype=float) for x, _ in batch])
    y = np.array([lab for _, lab in batch], dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    for m in masks:
        _check_mask(params, m)
    keep_prob = masks[0].keep_prob
    layer_masks = [np.stack([m.masks[k] for m in masks])
                   for k in range(len(masks[0].masks))]
    return loss_and_gradient_stacked(params, X, y, layer_masks, keep_prob)


def loss_and_gradient_stacked(params: MlpParams, X: np.ndarray, y: np.ndarray,
                              layer_masks, keep_prob: float):
    """Array-native cross-entropy loss/gradient (fast path used in training)."""
    n = X.shape[0]
    f, cache = _forward_stacked(params, X, layer_masks, keep_prob)
    p = logistic(f)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))

    # d(loss)/df is (p - y)/n where the clamp is inactive, exactly 0 elsewhere.
    active = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    df = np.where(active, p - y, 0.0) / n

    inv = 1.0 / keep_prob
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    a_last = cache["acts"][-1]
    grad_w[-1] = a_last.T @ df[:, None]
    grad_b[-1] = np.array([df.sum()])
    da = df[:, None] @ params.weights[-1].T
    for k in range(len(params.weights) - 2, -1, -1):
        dz = da * cache["masks"][k] * inv * (cache["pre"][k] > 0)
        grad_w[k] = cache["acts"][k].T @ dz
        grad_b[k] = dz.sum(axis=0)
        if k > 0:
            da = dz @ params.weights[k].T
    return loss, MlpParams(grad_w, grad_b)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams):
    """One Adam update with bias correction. Returns (new_params, new_state)."""
    flat_p = params.weights + params.biases
    flat_g = grads.weights + grads.biases
    if len(state.m) != len(flat_p):
        raise ValueError("optimizer state does not match parameter count")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(flat_p, flat_g, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    n_w = len(params.weights)
    out_params = MlpParams(new_p[:n_w], new_p[n_w:])
    out_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return out_params, out_state
