"""Minimal dense tanh network with manual reverse-mode gradients and Adam.

Weights live in a single flat vector so the meta-learning problem can treat
the whole network as one decision variable.  Layout per layer: the (fan_in,
fan_out) weight matrix in row-major order, then the bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from cso_debias.rng import RngStream

__all__ = [
    "NetSpec",
    "AdamState",
    "param_count",
    "init_weights",
    "unpack",
    "forward",
    "forward_batch",
    "loss_and_grad",
    "adam_step",
]


@dataclass(frozen=True)
class NetSpec:
    """Fully connected net: scalar in, tanh hidden layers, linear scalar out."""

    layer_widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 3:
            raise ValueError("need at least one hidden layer")
        if any(w < 1 for w in widths):
            raise ValueError("all widths must be >= 1")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def shapes(self):
        ws = self.layer_widths
        return [(ws[i], ws[i + 1]) for i in range(len(ws) - 1)]


def param_count(spec: NetSpec) -> int:
    return sum((fi + 1) * fo for fi, fo in spec.shapes)


def init_weights(spec: NetSpec, rng: RngStream) -> np.ndarray:
    """Uniform init in +-1/sqrt(fan_in), biases included."""
    gen = rng.generator
    parts = []
    for fan_in, fan_out in spec.shapes:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(gen.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(gen.uniform(-bound, bound, size=fan_out))
    return np.concatenate(parts)


def unpack(spec: NetSpec, weights: np.ndarray):
    """Split the flat vector into per-layer (W, b) pairs."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (param_count(spec),):
        raise ValueError(
            f"weight vector has length {weights.shape}, expected ({param_count(spec)},)"
        )
    layers = []
    off = 0
    for fan_in, fan_out in spec.shapes:
        w = weights[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = weights[off : off + fan_out]
        off += fan_out
        layers.append((w, b))
    return layers


def forward_batch(spec: NetSpec, weights: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Network outputs for a batch of scalar inputs."""
    layers = unpack(spec, weights)
    a = np.asarray(ts, dtype=float).reshape(-1, 1)
    for w, b in layers[:-1]:
        a = np.tanh(a @ w + b)
    w, b = layers[-1]
    return (a @ w + b)[:, 0]


def forward(spec: NetSpec, weights: np.ndarray, t: float) -> float:
    return float(forward_batch(spec, weights, np.array([t]))[0])


def loss_and_grad(
    spec: NetSpec,
    weights: np.ndarray,
    ts: np.ndarray,
    amplitude: float,
    phase: float,
):
    """Half mean-squared error against A*sin(t - phase), with exact gradient."""
    ts = np.asarray(ts, dtype=float).ravel()
    if ts.size == 0:
        raise ValueError("dataset must be nonempty")
    layers = unpack(spec, weights)
    targets = amplitude * np.sin(ts - phase)

    activations = [ts.reshape(-1, 1)]
    a = activations[0]
    for w, b in layers[:-1]:
        a = np.tanh(a @ w + b)
        activations.append(a)
    w_out, b_out = layers[-1]
    preds = (a @ w_out + b_out)[:, 0]

    resid = preds - targets
    n = ts.size
    loss = 0.5 * float(np.mean(resid**2))

    # reverse pass; delta holds dLoss/d(pre-activation) per layer
    grads = [None] * len(layers)
    delta = (resid / n).reshape(-1, 1)
    grads[-1] = (activations[-1].T @ delta, delta.sum(axis=0))
    back = delta @ w_out.T
    for li in range(len(layers) - 2, -1, -1):
        delta = back * (1.0 - activations[li + 1] ** 2)
        grads[li] = (activations[li].T @ delta, delta.sum(axis=0))
        if li > 0:
            back = delta @ layers[li][0].T

    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, grad: np.ndarray):
    """One bias-corrected Adam update; returns (weight_delta, new_state)."""
    grad = np.asarray(grad, dtype=float)
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    delta = -state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return delta, replace(state, first_moment=m, second_moment=v, step_count=t)
