"""Minimal dense-network engine: forward, backprop, Glorot init, Adam.

Everything runs in double precision.  Initial parameters are snapped to values
exactly representable in 32-bit floats so that serializing a freshly built
network (the federation hand-off format) is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError
from .rng import ROLE_INIT, stream

ACTIVATIONS = ("leaky_relu", "sigmoid", "tanh", "identity")

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: output = activation(W x + b)."""

    input_dim: int
    output_dim: int
    activation: str

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(
                f"layer dims must be >= 1, got {self.input_dim}x{self.output_dim}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class DenseParams:
    """Trainable parameters of one layer: weights (out, in), biases (out,)."""

    weights: np.ndarray
    biases: np.ndarray


@dataclass
class Network:
    specs: tuple[LayerSpec, ...]
    params: list[DenseParams]
    seed: int

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_eval(kind: str, x):
    """Evaluate an activation and its first derivative at x."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "leaky_relu":
        y = np.where(x >= 0, x, LEAKY_SLOPE * x)
        dy = np.where(x >= 0, 1.0, LEAKY_SLOPE)
    elif kind == "sigmoid":
        y = _sigmoid(x)
        dy = y * (1.0 - y)
    elif kind == "tanh":
        y = np.tanh(x)
        dy = 1.0 - y * y
    elif kind == "identity":
        y = x.copy()
        dy = np.ones_like(x)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return y, dy


def _activation_second(kind: str, x):
    """Second derivative, needed for backprop through input gradients."""
    if kind == "leaky_relu" or kind == "identity":
        return np.zeros_like(x)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s) * (1.0 - 2.0 * s)
    if kind == "tanh":
        t = np.tanh(x)
        return -2.0 * t * (1.0 - t * t)
    raise ConfigError(f"unknown activation {kind!r}")


def _snap_to_f32(a: np.ndarray, bound: float | None = None) -> np.ndarray:
    """Round to the nearest float32 value, optionally clamped to [-bound, bound]."""
    a32 = a.astype(np.float32)
    if bound is not None:
        b32 = np.float32(bound)
        if float(b32) > bound:
            b32 = np.nextafter(b32, np.float32(0))
        a32 = np.clip(a32, -b32, b32)
    return a32.astype(np.float64)


def init_network(specs, seed: int) -> Network:
    """Build a network with Glorot-uniform weights and zero biases.

    Deterministic for a fixed seed; all parameters are float32-representable.
    """
    specs = tuple(specs)
    if not specs:
        raise ConfigError("a network needs at least one layer")
    for prev, cur in zip(specs, specs[1:]):
        if prev.output_dim != cur.input_dim:
            raise ConfigError(
                f"layer chain mismatch: {prev.output_dim} -> {cur.input_dim}"
            )
    rng = stream(seed, ROLE_INIT)
    params = []
    for spec in specs:
        bound = np.sqrt(6.0 / (spec.input_dim + spec.output_dim))
        w = rng.uniform(-bound, bound, size=(spec.output_dim, spec.input_dim))
        params.append(
            DenseParams(
                weights=_snap_to_f32(w, bound),
                biases=np.zeros(spec.output_dim, dtype=np.float64),
            )
        )
    return Network(specs=specs, params=params, seed=seed)


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations kept for the backward pass."""

    inputs: list = field(default_factory=list)
    zs: list = field(default_factory=list)


def forward(net: Network, batch: np.ndarray):
    """Run the network on a batch (rows = samples); returns (output, cache)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch shape {batch.shape} incompatible with input dim {net.input_dim}"
        )
    cache = ForwardCache()
    a = batch
    for spec, p in zip(net.specs, net.params):
        z = a @ p.weights.T + p.biases
        cache.inputs.append(a)
        cache.zs.append(z)
        a, _ = activation_eval(spec.activation, z)
    return a, cache


def backward(net: Network, cache: ForwardCache, output_gradient: np.ndarray):
    """Backpropagate an output gradient through a cached forward pass.

    Returns (grads, input_gradient) where grads is a list of (dW, db) pairs
    aligned with net.params.
    """
    if len(cache.zs) != len(net.specs):
        raise UsageError("cache does not match this network")
    for spec, a, z in zip(net.specs, cache.inputs, cache.zs):
        if a.shape[1] != spec.input_dim or z.shape[1] != spec.output_dim:
            raise UsageError("cache does not match this network")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.zs[-1].shape:
        raise UsageError(
            f"output gradient shape {g.shape} does not match cached output "
            f"shape {cache.zs[-1].shape}"
        )
    grads = [None] * len(net.specs)
    for i in range(len(net.specs) - 1, -1, -1):
        _, dact = activation_eval(net.specs[i].activation, cache.zs[i])
        delta = g * dact
        grads[i] = (delta.T @ cache.inputs[i], delta.sum(axis=0))
        g = delta @ net.params[i].weights
    return grads, g


def backward_input_only(net: Network, cache: ForwardCache,
                        output_gradient: np.ndarray) -> np.ndarray:
    """backward() without forming parameter gradients; returns input grad."""
    if len(cache.zs) != len(net.specs):
        raise UsageError("cache does not match this network")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.zs[-1].shape:
        raise UsageError(
            f"output gradient shape {g.shape} does not match cached output "
            f"shape {cache.zs[-1].shape}"
        )
    for i in range(len(net.specs) - 1, -1, -1):
        _, dact = activation_eval(net.specs[i].activation, cache.zs[i])
        g = (g * dact) @ net.params[i].weights
    return g


def input_gradients(net: Network, batch: np.ndarray):
    """Forward plus the gradient of the summed outputs w.r.t. each input row.

    For a scalar-output network this is d out_i / d x_i per sample.  Returns
    (output, input_gradient); no parameter gradients are formed.
    """
    out, cache = forward(net, batch)
    g = np.ones_like(out)
    for i in range(len(net.specs) - 1, -1, -1):
        _, dact = activation_eval(net.specs[i].activation, cache.zs[i])
        g = (g * dact) @ net.params[i].weights
    return out, g


def double_backward(net: Network, batch: np.ndarray, tangents: np.ndarray):
    """Parameter gradients of S = sum_i tangents_i . (d out_i / d x_i).

    The directional derivative of the output along each row's tangent is
    computed with a forward tangent pass; reverse mode over that pass yields
    dS/dW and dS/db exactly (second derivatives of the activations included).
    Used for losses that penalize input-gradient norms.
    """
    batch = np.asarray(batch, dtype=np.float64)
    tangents = np.asarray(tangents, dtype=np.float64)
    if tangents.shape != batch.shape:
        raise ShapeError("tangents must have the same shape as the batch")
    n_layers = len(net.specs)
    a_list, z_list, zdot_list, adot_list = [], [], [], []
    a = batch
    adot = tangents
    for spec, p in zip(net.specs, net.params):
        z = a @ p.weights.T + p.biases
        zdot = adot @ p.weights.T
        a_list.append(a)
        z_list.append(z)
        zdot_list.append(zdot)
        adot_list.append(adot)
        a, dact = activation_eval(spec.activation, z)
        adot = dact * zdot
    # Reverse pass: adjoints of a (abar) and of the tangent adot (adotbar).
    abar = np.zeros_like(a)
    adotbar = np.ones_like(adot)
    grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        spec, p = net.specs[i], net.params[i]
        _, dact = activation_eval(spec.activation, z_list[i])
        d2act = _activation_second(spec.activation, z_list[i])
        zdotbar = dact * adotbar
        zbar = abar * dact + adotbar * d2act * zdot_list[i]
        dw = zbar.T @ a_list[i] + zdotbar.T @ adot_list[i]
        db = zbar.sum(axis=0)
        grads[i] = (dw, db)
        abar = zbar @ p.weights
        adotbar = zdotbar @ p.weights
    return grads


@dataclass
class AdamState:
    """Adam moments for one network's parameter list."""

    learning_rate: float
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, learning_rate: float, **kwargs) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kwargs)
        for p in net.params:
            state.first_moment.append(
                (np.zeros_like(p.weights), np.zeros_like(p.biases))
            )
            state.second_moment.append(
                (np.zeros_like(p.weights), np.zeros_like(p.biases))
            )
        return state


def adam_step(params: list[DenseParams], grads, state: AdamState) -> None:
    """One Adam update with bias correction; mutates params and state."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise UsageError("params, grads, and state must have equal layer counts")
    for i, (dw, db) in enumerate(grads):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericError(f"non-finite gradient in layer {i}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        for target, grad, m_arr, v_arr in ((p.weights, g[0], m[0], v[0]),
                                           (p.biases, g[1], m[1], v[1])):
            m_arr *= b1
            m_arr += (1.0 - b1) * grad
            v_arr *= b2
            v_arr += (1.0 - b2) * grad * grad
            target -= state.learning_rate * (m_arr / c1) / (np.sqrt(v_arr / c2)
                                                            + state.epsilon)
