"""Small fully-connected networks with hand-written backprop and Adam.

Everything is plain float64 numpy. Networks are fixed-topology MLPs
(ReLU hidden layers, linear or ReLU output); that is all the training
code needs, so there is no general autodiff graph here.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "linear")


class NumericsError(RuntimeError):
    """Raised when a computation produced or would ingest non-finite values."""


@dataclass
class NetLayout:
    """Shape descriptor: enough to rebuild an MlpNet from a flat vector."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "linear"

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass
class FlatParams:
    """All parameters of one network as a single contiguous vector."""

    values: Array
    layout: NetLayout

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), self.layout)


@dataclass
class MlpNet:
    layer_sizes: list[int]
    weights: list[Array]  # weights[i]: (n_in, n_out)
    biases: list[Array]  # biases[i]: (n_out,)
    activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS or self.output_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation tag: {self.activation}/{self.output_activation}")
        sizes = self.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("layer count does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with sizes {sizes}"
                )

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layout(self) -> NetLayout:
        return NetLayout(tuple(self.layer_sizes), self.activation, self.output_activation)

    @property
    def n_params(self) -> int:
        return self.layout.n_params

    def copy(self) -> "MlpNet":
        return MlpNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.output_activation,
        )


def init_mlp(
    layer_sizes: list[int],
    rng: np.random.Generator,
    activation: str = "relu",
    output_activation: str = "linear",
    output_scale: float = 1e-3,
) -> MlpNet:
    """He fan-in init for hidden layers, small uniform init for the output layer.

    The tiny output layer keeps early critic/target values near zero, which
    stabilises bootstrapped regression targets.
    """
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        n_in, n_out = layer_sizes[i], layer_sizes[i + 1]
        if i == n_layers - 1:
            w = rng.uniform(-output_scale, output_scale, size=(n_in, n_out))
            b = rng.uniform(-output_scale, output_scale, size=n_out)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            b = np.zeros(n_out)
        weights.append(w)
        biases.append(b)
    return MlpNet(list(layer_sizes), weights, biases, activation, output_activation)


def _act(z: Array, tag: str) -> Array:
    return np.maximum(z, 0.0) if tag == "relu" else z


def _act_deriv(z: Array, tag: str) -> Array:
    return (z > 0.0).astype(float) if tag == "relu" else np.ones_like(z)


def _as_batch(x: Array, dim: int, name: str) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"{name} has length {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"{name} has width {x.shape[1]}, expected {dim}")
        return x, False
    raise ValueError(f"{name} must be a vector or a batch of vectors")


def forward(net: MlpNet, x: Array) -> Array:
    """Evaluate the network. Accepts a single vector or a (batch, in_dim) array."""
    xb, single = _as_batch(x, net.in_dim, "input")
    a = xb
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w
        z += b
        tag = net.output_activation if i == last else net.activation
        a = np.maximum(z, 0.0, out=z) if tag == "relu" else z
    return a[0] if single else a


def forward_trace(net: MlpNet, x: Array) -> tuple[Array, list[tuple[Array, Array]]]:
    """Forward pass keeping (layer input, pre-activation) pairs for backprop."""
    xb, single = _as_batch(x, net.in_dim, "input")
    a = xb
    trace = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w
        z += b
        trace.append((a, z))
        tag = net.output_activation if i == last else net.activation
        a = np.maximum(z, 0.0) if tag == "relu" else z
    return (a[0] if single else a), trace


def backward_from_trace(
    net: MlpNet, trace: list[tuple[Array, Array]], upstream: Array
) -> tuple[FlatParams, Array]:
    """Gradient of sum_b <upstream_b, forward(net, x_b)> from a stored trace.

    Returns (parameter gradient as FlatParams, gradient w.r.t. the input batch).
    """
    up, single = _as_batch(upstream, net.out_dim, "upstream_grad")
    if up.shape[0] != trace[0][0].shape[0]:
        raise ValueError("upstream batch size does not match the trace")
    grads_w: list[Array] = [None] * len(net.weights)  # type: ignore[list-item]
    grads_b: list[Array] = [None] * len(net.weights)  # type: ignore[list-item]
    last = len(net.weights) - 1
    delta = up
    for i in range(last, -1, -1):
        a_in, z = trace[i]
        tag = net.output_activation if i == last else net.activation
        if tag == "relu":
            delta = delta * (z > 0.0)
        grads_w[i] = a_in.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ net.weights[i].T
    input_grad = delta @ net.weights[0].T
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])
    return FlatParams(flat, net.layout), (input_grad[0] if single else input_grad)


def input_grad_from_trace(net: MlpNet, trace: list[tuple[Array, Array]], upstream: Array) -> Array:
    """Gradient w.r.t. the input only; skips all weight-gradient products."""
    up, single = _as_batch(upstream, net.out_dim, "upstream_grad")
    last = len(net.weights) - 1
    delta = up
    for i in range(last, -1, -1):
        tag = net.output_activation if i == last else net.activation
        if tag == "relu":
            delta = delta * (trace[i][1] > 0.0)
        delta = delta @ net.weights[i].T
    return delta[0] if single else delta


def backward(net: MlpNet, x: Array, upstream: Array) -> tuple[FlatParams, Array]:
    """Gradient of <upstream, forward(net, x)> w.r.t. parameters and input."""
    _, trace = forward_trace(net, x)
    return backward_from_trace(net, trace, upstream)


def flatten(net: MlpNet) -> FlatParams:
    vec = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(net.weights, net.biases)])
    return FlatParams(vec, net.layout)


def unflatten(flat: FlatParams) -> MlpNet:
    layout = flat.layout
    if flat.values.shape != (layout.n_params,):
        raise ValueError(
            f"flat vector has {flat.values.shape[0]} entries, layout expects {layout.n_params}"
        )
    sizes = layout.layer_sizes
    weights, biases, off = [], [], 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        weights.append(flat.values[off : off + n_in * n_out].reshape(n_in, n_out).copy())
        off += n_in * n_out
        biases.append(flat.values[off : off + n_out].copy())
        off += n_out
    return MlpNet(list(sizes), weights, biases, layout.activation, layout.output_activation)


def write_flat(net: MlpNet, values: Array) -> None:
    """Overwrite a network's parameters in place from a flat vector."""
    if values.shape != (net.n_params,):
        raise ValueError("flat vector length does not match the network")
    off = 0
    for w, b in zip(net.weights, net.biases):
        w[...] = values[off : off + w.size].reshape(w.shape)
        off += w.size
        b[...] = values[off : off + b.size]
        off += b.size


@dataclass
class AdamState:
    first_moment: Array
    second_moment: Array
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, n: int, learning_rate: float) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate)


def adam_step(params: Array, grad: Array, state: AdamState) -> tuple[Array, AdamState]:
    """One bias-corrected Adam update. Rejects non-finite gradients untouched."""
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise ValueError("parameter/gradient/moment shapes do not match")
    if not np.all(np.isfinite(grad)):
        raise NumericsError("non-finite gradient passed to adam_step")
    state.step_count += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1**state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2**state.step_count)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if not np.all(np.isfinite(new_params)):
        raise NumericsError("Adam update produced non-finite parameters")
    return new_params, state


def check_finite(net: MlpNet, where: str = "") -> None:
    for w, b in zip(net.weights, net.biases):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericsError(f"non-finite network parameters{' in ' + where if where else ''}")


def net_to_dict(net: MlpNet) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "output_activation": net.output_activation,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def net_from_dict(doc: dict) -> MlpNet:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported network checkpoint version: {doc.get('version')!r}")
    return MlpNet(
        [int(s) for s in doc["layer_sizes"]],
        [np.asarray(w, dtype=float) for w in doc["weights"]],
        [np.asarray(b, dtype=float) for b in doc["biases"]],
        doc["activation"],
        doc["output_activation"],
    )


def save_net(net: MlpNet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net_to_dict(net), fh)


def load_net(path: str) -> MlpNet:
    with open(path, "r", encoding="utf-8") as fh:
        return net_from_dict(json.load(fh))


def polyak_update(target: MlpNet, online: MlpNet, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise, in place."""
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - tau
        tw += tau * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - tau
        tb += tau * ob


def clone_net(net: MlpNet) -> MlpNet:
    return copy.deepcopy(net)
