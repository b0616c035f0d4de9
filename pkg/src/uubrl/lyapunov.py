"""Learned Lyapunov critic: targets, least-squares fitting, target tracking.

Two supervision choices exist. With the value candidate the target is the
constraint cost plus a discounted bootstrap through a slow-moving target
network; with the cost candidate the target is the instantaneous cost itself
and no target network is involved. The critic output layer is rectified, so
the learned function is non-negative everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nets, policy as policy_mod
from .buffers import TransitionBatch
from .nets import AdamState, Array, FlatParams, MlpNet


@dataclass
class LyapunovCritic:
    net: MlpNet  # (state[, action]) -> scalar, rectified output
    target_net: MlpNet | None
    candidate: str  # "value" | "cost"
    gamma: float
    tau: float
    adam: AdamState
    state_dim: int
    action_dim: int  # 0 for a state-only function
    n_target_actions: int = 2

    @property
    def state_only(self) -> bool:
        return self.action_dim == 0


def make_lyapunov_critic(
    state_dim: int,
    action_dim: int,
    hidden_sizes: tuple[int, ...],
    candidate: str,
    rng: np.random.Generator,
    gamma: float = 0.99,
    tau: float = 0.005,
    learning_rate: float = 3e-4,
    n_target_actions: int = 2,
) -> LyapunovCritic:
    if candidate not in ("value", "cost"):
        raise ValueError(f"unknown Lyapunov candidate '{candidate}'")
    net = nets.init_mlp([state_dim + action_dim, *hidden_sizes, 1], rng, output_activation="relu")
    # start the rectified output in its active region; a zero-initialized
    # rectified head can die wholesale under mostly-zero cost targets
    net.biases[-1][...] = 0.5
    target = nets.clone_net(net) if candidate == "value" else None
    return LyapunovCritic(
        net=net,
        target_net=target,
        candidate=candidate,
        gamma=gamma,
        tau=tau,
        adam=AdamState.for_params(net.n_params, learning_rate),
        state_dim=state_dim,
        action_dim=action_dim,
        n_target_actions=n_target_actions,
    )


def critic_value(critic: LyapunovCritic, states: Array, actions: Array | None = None) -> Array:
    if critic.state_only:
        x = states
    else:
        x = np.concatenate([states, actions], axis=-1)
    return nets.forward(critic.net, x)[..., 0]


def compute_target(
    critic: LyapunovCritic,
    batch: TransitionBatch,
    policy: policy_mod.SquashedGaussianPolicy | None,
    rng: np.random.Generator | None = None,
) -> Array:
    """Regression targets for one batch; no gradient flows through these."""
    if critic.candidate == "cost":
        return batch.costs.copy()
    if policy is None or rng is None:
        raise ValueError("value candidate targets need the current policy and an rng")
    n = len(batch)
    best = np.full(n, -np.inf)
    for _ in range(critic.n_target_actions):
        noise = rng.standard_normal((n, policy.action_dim))
        a_next = policy_mod.sample(policy, batch.next_states, noise).action
        x = np.concatenate([batch.next_states, a_next], axis=-1)
        best = np.maximum(best, nets.forward(critic.target_net, x)[:, 0])
    # the max over sampled actions under-approximates the true max over actions
    return batch.costs + critic.gamma * (1.0 - batch.dones) * best


def loss_and_grad(
    critic: LyapunovCritic, inputs: Array, targets: Array
) -> tuple[float, FlatParams]:
    """Half mean-squared error against fixed targets, with its parameter gradient."""
    pred, trace = nets.forward_trace(critic.net, inputs)
    diff = pred[:, 0] - targets
    loss = float(0.5 * np.mean(diff**2))
    upstream = (diff / len(diff))[:, None]
    grad, _ = nets.backward_from_trace(critic.net, trace, upstream)
    return loss, grad


def train_step(
    critic: LyapunovCritic,
    batch: TransitionBatch,
    policy: policy_mod.SquashedGaussianPolicy | None,
    rng: np.random.Generator | None = None,
) -> float:
    """One Adam step on the least-squares objective; returns the pre-step loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = compute_target(critic, batch, policy, rng)
    if critic.state_only:
        inputs = batch.states
    else:
        inputs = np.concatenate([batch.states, batch.actions], axis=-1)
    loss, grad = loss_and_grad(critic, inputs, targets)
    if not np.isfinite(loss):
        raise nets.NumericsError("non-finite Lyapunov loss")
    flat = nets.flatten(critic.net)
    new_values, _ = nets.adam_step(flat.values, grad.values, critic.adam)
    nets.write_flat(critic.net, new_values)
    return loss


def soft_update(critic: LyapunovCritic) -> None:
    """Exponential moving average of the target toward the online network."""
    if critic.candidate == "cost" or critic.target_net is None:
        warnings.warn("soft_update is a no-op for the cost candidate", stacklevel=2)
        return
    nets.polyak_update(critic.target_net, critic.net, critic.tau)


def lyapunov_value(
    critic: LyapunovCritic,
    states: Array,
    policy: policy_mod.SquashedGaussianPolicy | None,
    n_samples: int,
    rng: np.random.Generator | None = None,
) -> Array:
    """Monte-Carlo estimate of the state function E_{a~pi} L_c(s, a)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if critic.state_only:
        return critic_value(critic, states)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if policy is None or rng is None:
        raise ValueError("state-action critics need the policy and an rng")
    total = np.zeros(states.shape[0])
    for _ in range(n_samples):
        noise = rng.standard_normal((states.shape[0], policy.action_dim))
        a = policy_mod.sample(policy, states, noise).action
        total += critic_value(critic, states, a)
    return total / n_samples


def make_lyapunov_fn(
    critic: LyapunovCritic,
    policy: policy_mod.SquashedGaussianPolicy | None,
    n_samples: int,
    rng: np.random.Generator | None = None,
):
    """Bind a critic into a plain states -> values function for the verifier."""

    def fn(states: Array) -> Array:
        return lyapunov_value(critic, states, policy, n_samples, rng)

    return fn


def critic_to_dict(critic: LyapunovCritic) -> dict:
    doc = {
        "version": nets.CHECKPOINT_VERSION,
        "candidate": critic.candidate,
        "gamma": critic.gamma,
        "tau": critic.tau,
        "state_dim": critic.state_dim,
        "action_dim": critic.action_dim,
        "n_target_actions": critic.n_target_actions,
        "net": nets.net_to_dict(critic.net),
    }
    if critic.target_net is not None:
        doc["target_net"] = nets.net_to_dict(critic.target_net)
    return doc


def critic_from_dict(doc: dict, learning_rate: float = 3e-4) -> LyapunovCritic:
    net = nets.net_from_dict(doc["net"])
    target = nets.net_from_dict(doc["target_net"]) if "target_net" in doc else None
    return LyapunovCritic(
        net=net,
        target_net=target,
        candidate=doc["candidate"],
        gamma=float(doc["gamma"]),
        tau=float(doc["tau"]),
        adam=AdamState.for_params(net.n_params, learning_rate),
        state_dim=int(doc["state_dim"]),
        action_dim=int(doc["action_dim"]),
        n_target_actions=int(doc.get("n_target_actions", 2)),
    )
