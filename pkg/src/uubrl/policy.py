"""Tanh-squashed Gaussian controller.

The network maps a state to (mean, log_std) of a diagonal Gaussian; samples
are squashed through tanh and affinely rescaled into the action box. The
log-density carries the exact change-of-variables correction, computed in
the numerically stable softplus form. KL divergence and the Fisher metric
are defined on the pre-squash Gaussian: the squashing is a shared bijection,
so they equal their action-space counterparts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .nets import Array, FlatParams, MlpNet

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class SquashedGaussianPolicy:
    net: MlpNet  # state -> concat(mean, log_std)
    action_low: Array
    action_high: Array
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX

    def __post_init__(self) -> None:
        self.action_low = np.asarray(self.action_low, dtype=float)
        self.action_high = np.asarray(self.action_high, dtype=float)
        m = self.action_low.shape[0]
        if self.action_high.shape != (m,) or np.any(self.action_high <= self.action_low):
            raise ValueError("action bounds must be same-length vectors with high > low")
        if self.net.out_dim != 2 * m:
            raise ValueError(f"policy net must output 2*{m} values, got {self.net.out_dim}")

    @property
    def state_dim(self) -> int:
        return self.net.in_dim

    @property
    def action_dim(self) -> int:
        return self.action_low.shape[0]

    @property
    def half_range(self) -> Array:
        return 0.5 * (self.action_high - self.action_low)

    def copy(self) -> "SquashedGaussianPolicy":
        return SquashedGaussianPolicy(
            self.net.copy(), self.action_low.copy(), self.action_high.copy(),
            self.log_std_min, self.log_std_max,
        )

    def with_flat(self, values: Array) -> "SquashedGaussianPolicy":
        other = self.copy()
        nets.write_flat(other.net, values)
        return other


@dataclass
class PolicySample:
    action: Array
    pre_squash: Array
    log_prob: Array
    noise: Array


def make_policy(
    state_dim: int,
    action_low: Array,
    action_high: Array,
    hidden_sizes: tuple[int, ...],
    rng: np.random.Generator,
) -> SquashedGaussianPolicy:
    action_low = np.asarray(action_low, dtype=float)
    m = action_low.shape[0]
    net = nets.init_mlp([state_dim, *hidden_sizes, 2 * m], rng)
    return SquashedGaussianPolicy(net, action_low, np.asarray(action_high, dtype=float))


def _softplus(x: Array) -> Array:
    return np.logaddexp(0.0, x)


def _log1m_tanh2(u: Array) -> Array:
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


def dist_params(
    policy: SquashedGaussianPolicy, states: Array
) -> tuple[Array, Array, Array]:
    """(mean, clamped log_std, clamp mask). Mask is 1 where log_std is interior."""
    out = nets.forward(policy.net, states)
    return _split_params(policy, out)


def dist_params_trace(policy: SquashedGaussianPolicy, states: Array):
    """Like dist_params but also returns the forward trace for later backprop."""
    out, trace = nets.forward_trace(policy.net, states)
    mean, log_std, mask = _split_params(policy, out)
    return mean, log_std, mask, trace


def _split_params(policy: SquashedGaussianPolicy, out: Array) -> tuple[Array, Array, Array]:
    m = policy.action_dim
    mean = out[..., :m]
    raw = out[..., m:]
    log_std = np.clip(raw, policy.log_std_min, policy.log_std_max)
    mask = ((raw > policy.log_std_min) & (raw < policy.log_std_max)).astype(float)
    if not np.all(np.isfinite(mean)):
        raise nets.NumericsError("policy network produced non-finite mean")
    return mean, log_std, mask


def backprop_dist(
    policy: SquashedGaussianPolicy,
    trace,
    mask: Array,
    up_mean: Array,
    up_log_std: Array,
) -> FlatParams:
    """Parameter gradient given upstreams on (mean, log_std); respects the clamp."""
    upstream = np.concatenate([up_mean, up_log_std * mask], axis=-1)
    grad, _ = nets.backward_from_trace(policy.net, trace, upstream)
    return grad


def squash(policy: SquashedGaussianPolicy, u: Array) -> Array:
    return policy.action_low + (np.tanh(u) + 1.0) * policy.half_range


def _gaussian_log_prob_at_noise(log_std: Array, noise: Array) -> Array:
    return -0.5 * noise**2 - log_std - _HALF_LOG_2PI


def sample(
    policy: SquashedGaussianPolicy, states: Array, noise: Array
) -> PolicySample:
    """Reparameterized draw: pre_squash = mean + exp(log_std) * noise.

    Accepts a single state/noise pair or matched batches.
    """
    states = np.asarray(states, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if states.ndim != noise.ndim:
        raise ValueError("states and noise must both be single vectors or both batches")
    mean, log_std, _ = dist_params(policy, states)
    u = mean + np.exp(log_std) * noise
    action = squash(policy, u)
    log_prob = (
        _gaussian_log_prob_at_noise(log_std, noise)
        - _log1m_tanh2(u)
        - np.log(policy.half_range)
    ).sum(axis=-1)
    return PolicySample(action=action, pre_squash=u, log_prob=log_prob, noise=noise)


def mean_action(policy: SquashedGaussianPolicy, states: Array) -> Array:
    """Deterministic mode: the squashed mean (zero-noise sample)."""
    mean, _, _ = dist_params(policy, states)
    return squash(policy, mean)


def unsquash(policy: SquashedGaussianPolicy, actions: Array) -> Array:
    """Inverse of squash, clamping to the open box by a fixed 1e-6 margin."""
    lo, hi = policy.action_low, policy.action_high
    clipped = np.clip(actions, lo + 1e-6, hi - 1e-6)
    y = (clipped - lo) / policy.half_range - 1.0
    return np.arctanh(y)


def log_prob(policy: SquashedGaussianPolicy, states: Array, actions: Array) -> Array:
    """Exact log-density of given actions (clamped just inside the bounds)."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    mean, log_std, _ = dist_params(policy, states)
    u = unsquash(policy, actions)
    z = (u - mean) * np.exp(-log_std)
    return (
        -0.5 * z**2 - log_std - _HALF_LOG_2PI - _log1m_tanh2(u) - np.log(policy.half_range)
    ).sum(axis=-1)


def entropy_estimate(
    policy: SquashedGaussianPolicy, states: Array, noises: Array
) -> float:
    """Sample entropy estimate: -mean log-density over a paired batch."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ValueError("entropy_estimate needs a non-empty batch of states")
    s = sample(policy, states, noises)
    return float(-np.mean(s.log_prob))


def kl_divergence(
    policy_p: SquashedGaussianPolicy, policy_q: SquashedGaussianPolicy, states: Array
) -> float:
    """Mean closed-form KL(p || q) between the pre-squash Gaussians."""
    if policy_p.action_dim != policy_q.action_dim:
        raise ValueError("policies act on different action dimensions")
    mean_p, log_std_p, _ = dist_params(policy_p, states)
    mean_q, log_std_q, _ = dist_params(policy_q, states)
    var_ratio = np.exp(2.0 * (log_std_p - log_std_q))
    per_dim = (
        log_std_q - log_std_p + 0.5 * (var_ratio + ((mean_p - mean_q) * np.exp(-log_std_q)) ** 2) - 0.5
    )
    return float(np.mean(per_dim.sum(axis=-1)))


def weighted_logprob_grad(
    policy: SquashedGaussianPolicy, states: Array, actions: Array, weights: Array
) -> FlatParams:
    """Gradient of sum_i w_i * log pi(a_i | s_i) w.r.t. the policy parameters.

    The actions are fixed data (likelihood-ratio form), so the gradient flows
    only through (mean, log_std).
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    w = np.asarray(weights, dtype=float)[:, None]
    mean, log_std, mask, trace = dist_params_trace(policy, states)
    u = unsquash(policy, actions)
    inv_var = np.exp(-2.0 * log_std)
    up_mean = w * (u - mean) * inv_var
    up_log_std = w * (((u - mean) ** 2) * inv_var - 1.0)
    return backprop_dist(policy, trace, mask, up_mean, up_log_std)


def fisher_vector_product(
    policy: SquashedGaussianPolicy,
    states: Array,
    v: FlatParams,
    damping: float,
    jvp_eps: float = 1e-6,
) -> FlatParams:
    """(F + damping * I) v for the state-averaged pre-squash Gaussian Fisher.

    F = J^T M J with M = diag(exp(-2 log_std)) on the mean block and 2*I on
    the log_std block. Jv comes from one central finite-difference JVP over
    the parameters; J^T (M J v) from one backward pass.
    """
    if damping <= 0.0:
        raise ValueError("damping must be positive")
    states = np.asarray(states, dtype=float)
    if states.ndim != 2:
        raise ValueError("fisher_vector_product expects a batch of states")
    vnorm = float(np.linalg.norm(v.values))
    if vnorm == 0.0:
        return FlatParams(np.zeros_like(v.values), v.layout)
    step = jvp_eps / vnorm
    theta = nets.flatten(policy.net).values
    plus = policy.with_flat(theta + step * v.values)
    minus = policy.with_flat(theta - step * v.values)
    mean_p, log_std_p, _ = dist_params(plus, states)
    mean_m, log_std_m, _ = dist_params(minus, states)
    d_mean = (mean_p - mean_m) / (2.0 * step)
    d_log_std = (log_std_p - log_std_m) / (2.0 * step)

    mean, log_std, mask, trace = dist_params_trace(policy, states)
    n = states.shape[0]
    up_mean = d_mean * np.exp(-2.0 * log_std) / n
    up_log_std = 2.0 * d_log_std / n
    grad = backprop_dist(policy, trace, mask, up_mean, up_log_std)
    return FlatParams(grad.values + damping * v.values, v.layout)


def policy_to_dict(policy: SquashedGaussianPolicy) -> dict:
    doc = nets.net_to_dict(policy.net)
    doc["action_low"] = policy.action_low.tolist()
    doc["action_high"] = policy.action_high.tolist()
    doc["log_std_bounds"] = [policy.log_std_min, policy.log_std_max]
    return doc


def policy_from_dict(doc: dict) -> SquashedGaussianPolicy:
    net = nets.net_from_dict(doc)
    lo, hi = doc["log_std_bounds"]
    return SquashedGaussianPolicy(
        net,
        np.asarray(doc["action_low"], dtype=float),
        np.asarray(doc["action_high"], dtype=float),
        float(lo),
        float(hi),
    )
