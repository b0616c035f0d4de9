"""Off-policy safe actor-critic with dual ascent on the entropy and safety
multipliers.

Each update draws one mini-batch from the main buffer and one from the edge
buffer. The twin Q critics regress on bootstrapped returns, the Lyapunov
critic on its candidate target, and the policy descends a Lagrangian whose
safety term pushes the Lyapunov value of successor states down on edge-set
samples. Both multipliers live as log-space scalars, so they stay positive
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import lyapunov as lyap_mod
from . import nets
from . import policy as policy_mod
from . import rollout as rollout_mod
from .buffers import ReplayBuffer, TransitionBatch, ingest_episode
from .envs.base import SafeEnv
from .lyapunov import LyapunovCritic
from .nets import AdamState, Array, FlatParams, MlpNet
from .policy import SquashedGaussianPolicy
from .runlog import RunLog

LSAC_COLUMNS = (
    "iteration",
    "episode_return",
    "safety_cost",
    "violations",
    "beta",
    "lambda",
    "q_loss",
    "l_loss",
    "policy_loss",
    "uub_residual",
)

LOG_MULTIPLIER_MIN = -15.0
LOG_MULTIPLIER_MAX = 5.0
RESIDUAL_CLIP = 5.0  # bounds the logit integrator's speed


@dataclass
class LsacConfig:
    hidden_sizes: tuple[int, ...] = (256, 256)
    batch_size: int = 256
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    lyapunov_lr: float = 3e-4
    multiplier_lr: float = 3e-4
    tau: float = 0.005
    gamma: float = 0.99
    alpha3: float = 1.0
    target_entropy: float = -1.0
    lyapunov_candidate: str = "value"
    lyapunov_batch_source: str = "main"  # or "edge"
    eta: float = 0.01
    total_env_steps: int = 150_000
    warmup_steps: int = 1_000
    update_after: int = 1_000
    updates_per_step: float = 1.0
    buffer_capacity: int = 1_000_000
    edge_buffer_capacity: int = 100_000
    beta_init: float = 0.2
    lambda_init: float = 0.5
    reward_scale: float = 1.0  # critic-side only; logs keep raw rewards
    freeze_lambda: bool = False
    n_target_actions: int = 2
    eval_interval_episodes: int = 40
    uub_check_episodes: int = 10
    uub_n_action_samples: int = 4
    stop_on_uub: bool = False
    min_iterations: int = 0
    max_iterations: int | None = None  # episode cap; None = until step budget


@dataclass
class LsacAgent:
    policy: SquashedGaussianPolicy
    q1: MlpNet
    q2: MlpNet
    q1_target: MlpNet
    q2_target: MlpNet
    lyapunov: LyapunovCritic
    log_beta: float
    log_lambda: float
    policy_adam: AdamState
    q1_adam: AdamState
    q2_adam: AdamState
    config: LsacConfig
    rng: np.random.Generator

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))

    @property
    def lam(self) -> float:
        return float(np.exp(self.log_lambda))


def make_lsac_agent(env: SafeEnv, config: LsacConfig, rng: np.random.Generator) -> LsacAgent:
    n, m = env.state_dim, env.action_dim
    hid = tuple(config.hidden_sizes)
    pol = policy_mod.make_policy(n, env.action_low, env.action_high, hid, rng)
    q1 = nets.init_mlp([n + m, *hid, 1], rng)
    q2 = nets.init_mlp([n + m, *hid, 1], rng)
    lyap = lyap_mod.make_lyapunov_critic(
        n,
        m,
        hid,
        config.lyapunov_candidate,
        rng,
        gamma=config.gamma,
        tau=config.tau,
        learning_rate=config.lyapunov_lr,
        n_target_actions=config.n_target_actions,
    )
    return LsacAgent(
        policy=pol,
        q1=q1,
        q2=q2,
        q1_target=nets.clone_net(q1),
        q2_target=nets.clone_net(q2),
        lyapunov=lyap,
        log_beta=float(np.log(config.beta_init)),
        log_lambda=float(np.log(max(config.lambda_init, 1e-12))),
        policy_adam=AdamState.for_params(pol.net.n_params, config.actor_lr),
        q1_adam=AdamState.for_params(q1.n_params, config.critic_lr),
        q2_adam=AdamState.for_params(q2.n_params, config.critic_lr),
        config=config,
        rng=rng,
    )


def _q_value(net: MlpNet, states: Array, actions: Array) -> Array:
    return nets.forward(net, np.concatenate([states, actions], axis=-1))[:, 0]


def q_targets(agent: LsacAgent, batch: TransitionBatch, noise: Array) -> tuple[Array, Array]:
    """Bootstrapped targets for both critics; next actions come from the
    current policy.

    An operating-region exit is valued as an absorbing state whose boundary
    reward repeats forever: truncation can never make leaving the region look
    cheaper than staying in a costly interior, and no network extrapolation
    beyond the boundary enters the targets. Timeouts bootstrap normally."""
    a_next = policy_mod.sample(agent.policy, batch.next_states, noise).action
    scale, gamma = agent.config.reward_scale, agent.config.gamma
    r = scale * batch.rewards
    absorbing = scale * batch.next_rewards / (1.0 - gamma)
    keep = 1.0 - batch.dones
    y1 = r + gamma * (
        keep * _q_value(agent.q1_target, batch.next_states, a_next) + batch.dones * absorbing
    )
    y2 = r + gamma * (
        keep * _q_value(agent.q2_target, batch.next_states, a_next) + batch.dones * absorbing
    )
    return y1, y2


def q_loss_and_grad(qnet: MlpNet, batch: TransitionBatch, targets: Array) -> tuple[float, FlatParams]:
    x = np.concatenate([batch.states, batch.actions], axis=-1)
    pred, trace = nets.forward_trace(qnet, x)
    diff = pred[:, 0] - targets
    loss = float(0.5 * np.mean(diff**2))
    grad, _ = nets.backward_from_trace(qnet, trace, (diff / len(diff))[:, None])
    return loss, grad


def q_train_step(agent: LsacAgent, batch: TransitionBatch) -> tuple[float, float]:
    """One Adam step on each critic, then track both target networks."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    noise = agent.rng.standard_normal((len(batch), agent.policy.action_dim))
    y1, y2 = q_targets(agent, batch, noise)
    losses = []
    for qnet, targets, adam in ((agent.q1, y1, agent.q1_adam), (agent.q2, y2, agent.q2_adam)):
        loss, grad = q_loss_and_grad(qnet, batch, targets)
        if not np.isfinite(loss):
            raise nets.NumericsError("non-finite Q loss")
        new_values, _ = nets.adam_step(nets.flatten(qnet).values, grad.values, adam)
        nets.write_flat(qnet, new_values)
        losses.append(loss)
    nets.polyak_update(agent.q1_target, agent.q1, agent.config.tau)
    nets.polyak_update(agent.q2_target, agent.q2, agent.config.tau)
    return losses[0], losses[1]


def _reparam_terms(policy: SquashedGaussianPolicy, states: Array, noise: Array):
    """Forward pieces of the reparameterized sample needed for the analytic
    policy gradient: trace, distribution params, pre-squash, action."""
    mean, log_std, mask, trace = policy_mod.dist_params_trace(policy, states)
    std = np.exp(log_std)
    u = mean + std * noise
    tanh_u = np.tanh(u)
    action = policy.action_low + (tanh_u + 1.0) * policy.half_range
    log_prob = (
        -0.5 * noise**2
        - log_std
        - 0.5 * np.log(2.0 * np.pi)
        - 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
        - np.log(policy.half_range)
    ).sum(axis=-1)
    return trace, mask, std, u, tanh_u, action, log_prob


def policy_objective(
    agent: LsacAgent,
    theta: Array,
    batch_main: TransitionBatch,
    batch_edge: TransitionBatch | None,
    noise_main: Array,
    noise_edge: Array | None,
) -> float:
    """The full Lagrangian at given policy parameters with frozen noise,
    critics, and multipliers. Pure function used by gradient checks."""
    pol = agent.policy.with_flat(theta)
    _, _, _, _, _, action, log_prob = _reparam_terms(pol, batch_main.states, noise_main)
    q_min = np.minimum(
        _q_value(agent.q1, batch_main.states, action),
        _q_value(agent.q2, batch_main.states, action),
    )
    value = float(np.mean(-q_min + agent.beta * log_prob))
    if batch_edge is not None and len(batch_edge) > 0:
        _, _, _, _, _, a_next, _ = _reparam_terms(pol, batch_edge.next_states, noise_edge)
        l_next = lyap_mod.critic_value(agent.lyapunov, batch_edge.next_states, a_next)
        l_curr = lyap_mod.critic_value(agent.lyapunov, batch_edge.states, batch_edge.actions)
        residual = l_next * batch_edge.next_in_edge - (
            l_curr - agent.config.alpha3 * batch_edge.costs
        ) * batch_edge.in_edge
        value += agent.lam * float(np.mean(residual))
    return value


@dataclass
class PolicyStepStats:
    """Reusable by-products of one policy gradient step: the same sample
    estimates the multiplier residuals need."""

    mean_log_prob: float
    edge_residual: float | None


def policy_loss_and_grad(
    agent: LsacAgent,
    batch_main: TransitionBatch,
    batch_edge: TransitionBatch | None,
    noise_main: Array,
    noise_edge: Array | None,
) -> tuple[float, FlatParams, PolicyStepStats]:
    """Analytic gradient of the Lagrangian w.r.t. the policy parameters."""
    pol = agent.policy
    n_main = len(batch_main)
    trace, mask, std, u, tanh_u, action, log_prob = _reparam_terms(pol, batch_main.states, noise_main)

    x = np.concatenate([batch_main.states, action], axis=-1)
    q1_pred, q1_trace = nets.forward_trace(agent.q1, x)
    q2_pred, q2_trace = nets.forward_trace(agent.q2, x)
    q1_pred, q2_pred = q1_pred[:, 0], q2_pred[:, 0]
    take_q1 = (q1_pred <= q2_pred).astype(float)
    loss = float(np.mean(-np.minimum(q1_pred, q2_pred) + agent.beta * log_prob))

    up1 = (-take_q1 / n_main)[:, None]
    up2 = (-(1.0 - take_q1) / n_main)[:, None]
    g1 = nets.input_grad_from_trace(agent.q1, q1_trace, up1)
    g2 = nets.input_grad_from_trace(agent.q2, q2_trace, up2)
    grad_action = (g1 + g2)[:, pol.state_dim :]

    dact_du = pol.half_range * (1.0 - tanh_u**2)
    du = grad_action * dact_du + (agent.beta / n_main) * 2.0 * tanh_u
    up_mean = du
    up_log_std = du * std * noise_main - agent.beta / n_main
    grad = policy_mod.backprop_dist(pol, trace, mask, up_mean, up_log_std)

    stats = PolicyStepStats(mean_log_prob=float(np.mean(log_prob)), edge_residual=None)
    if batch_edge is not None and len(batch_edge) > 0:
        n_edge = len(batch_edge)
        trace_e, mask_e, std_e, u_e, tanh_e, a_next, _ = _reparam_terms(
            pol, batch_edge.next_states, noise_edge
        )
        xe = np.concatenate([batch_edge.next_states, a_next], axis=-1)
        l_next, l_trace = nets.forward_trace(agent.lyapunov.net, xe)
        l_curr = lyap_mod.critic_value(agent.lyapunov, batch_edge.states, batch_edge.actions)
        residual = l_next[:, 0] * batch_edge.next_in_edge - (
            l_curr - agent.config.alpha3 * batch_edge.costs
        ) * batch_edge.in_edge
        stats.edge_residual = float(np.mean(residual))
        loss += agent.lam * stats.edge_residual

        up_l = (agent.lam * batch_edge.next_in_edge / n_edge)[:, None]
        ge = nets.input_grad_from_trace(agent.lyapunov.net, l_trace, up_l)
        grad_a_next = ge[:, pol.state_dim :]
        du_e = grad_a_next * pol.half_range * (1.0 - tanh_e**2)
        grad_edge = policy_mod.backprop_dist(pol, trace_e, mask_e, du_e, du_e * std_e * noise_edge)
        grad = FlatParams(grad.values + grad_edge.values, grad.layout)
    return loss, grad, stats


def _apply_policy_grad(agent: LsacAgent, loss: float, grad: FlatParams) -> None:
    if not np.isfinite(loss):
        raise nets.NumericsError("non-finite policy loss")
    new_values, _ = nets.adam_step(nets.flatten(agent.policy.net).values, grad.values, agent.policy_adam)
    nets.write_flat(agent.policy.net, new_values)


def policy_train_step(
    agent: LsacAgent, batch_main: TransitionBatch, batch_edge: TransitionBatch | None
) -> float:
    """One Adam step on the policy; the safety part is zero when the edge
    batch is empty."""
    if len(batch_main) == 0:
        raise ValueError("empty main batch")
    noise_main = agent.rng.standard_normal((len(batch_main), agent.policy.action_dim))
    noise_edge = None
    if batch_edge is not None and len(batch_edge) > 0:
        noise_edge = agent.rng.standard_normal((len(batch_edge), agent.policy.action_dim))
    loss, grad, _ = policy_loss_and_grad(agent, batch_main, batch_edge, noise_main, noise_edge)
    _apply_policy_grad(agent, loss, grad)
    return loss


def multiplier_residuals(
    agent: LsacAgent,
    batch_main: TransitionBatch,
    batch_edge: TransitionBatch | None,
    noise_main: Array,
    noise_edge: Array | None,
) -> tuple[float, float]:
    """Ascent directions for the two multipliers: the entropy-gap residual
    (J(beta)/beta) and the safety residual (J(lambda)/lambda)."""
    log_prob = policy_mod.sample(agent.policy, batch_main.states, noise_main).log_prob
    r_beta = float(np.mean(log_prob) + agent.config.target_entropy)
    r_lambda = 0.0
    if batch_edge is not None and len(batch_edge) > 0:
        a_next = policy_mod.sample(agent.policy, batch_edge.next_states, noise_edge).action
        l_next = lyap_mod.critic_value(agent.lyapunov, batch_edge.next_states, a_next)
        l_curr = lyap_mod.critic_value(agent.lyapunov, batch_edge.states, batch_edge.actions)
        residual = l_next * batch_edge.next_in_edge - (
            l_curr - agent.config.alpha3 * batch_edge.costs
        ) * batch_edge.in_edge
        r_lambda = float(np.mean(residual))
    return r_beta, r_lambda


def _ascend_multipliers(
    agent: LsacAgent, r_beta: float, r_lambda: float | None
) -> tuple[float, float]:
    """Plain clipped ascent on the multiplier logits. The residual magnitude
    provides the damping: a multiplier slows down as its constraint closes in
    on satisfaction, which is what lets the dual variables settle instead of
    hunting between their bounds."""
    lr = agent.config.multiplier_lr
    r_beta = float(np.clip(r_beta, -RESIDUAL_CLIP, RESIDUAL_CLIP))
    agent.log_beta = float(np.clip(agent.log_beta + lr * r_beta, LOG_MULTIPLIER_MIN, LOG_MULTIPLIER_MAX))
    if r_lambda is not None and not agent.config.freeze_lambda:
        r_lambda = float(np.clip(r_lambda, -RESIDUAL_CLIP, RESIDUAL_CLIP))
        agent.log_lambda = float(
            np.clip(agent.log_lambda + lr * r_lambda, LOG_MULTIPLIER_MIN, LOG_MULTIPLIER_MAX)
        )
    return agent.beta, agent.lam


def multiplier_step(
    agent: LsacAgent, batch_main: TransitionBatch, batch_edge: TransitionBatch | None
) -> tuple[float, float]:
    """Gradient ascent on the multiplier logits; lambda is frozen when there
    is no edge data (and optionally by config for ablations)."""
    noise_main = agent.rng.standard_normal((len(batch_main), agent.policy.action_dim))
    noise_edge = None
    if batch_edge is not None and len(batch_edge) > 0:
        noise_edge = agent.rng.standard_normal((len(batch_edge), agent.policy.action_dim))
    r_beta, r_lambda = multiplier_residuals(agent, batch_main, batch_edge, noise_main, noise_edge)
    has_edge = batch_edge is not None and len(batch_edge) > 0
    return _ascend_multipliers(agent, r_beta, r_lambda if has_edge else None)


def train(
    agent: LsacAgent,
    env: SafeEnv,
    seed: int,
    log: RunLog | None = None,
) -> RunLog:
    """Episode loop: collect, ingest, then one update round per collected step.

    Every eval interval the sampled decrease condition is re-estimated on
    fresh frozen-policy episodes; training stops early only when that
    residual is negative and the minimum iteration count has passed.
    """
    from . import uub_verify  # local import; verifier depends on the critics

    cfg = agent.config
    if log is None:
        log = RunLog(LSAC_COLUMNS)
    seq = np.random.SeedSequence(seed)
    s_env, s_roll, s_buf_d, s_buf_e, s_check = seq.spawn(5)
    env.reset(seed=int(s_env.generate_state(1)[0] % 2**31))
    roll_rng = np.random.default_rng(s_roll)
    buf_main = ReplayBuffer(cfg.buffer_capacity, seed=int(s_buf_d.generate_state(1)[0] % 2**31))
    buf_edge = ReplayBuffer(cfg.edge_buffer_capacity, seed=int(s_buf_e.generate_state(1)[0] % 2**31))
    check_seed = int(s_check.generate_state(1)[0] % 2**31)

    total_steps = 0
    episode_idx = 0
    q_loss = l_loss = pi_loss = float("nan")
    residual = float("nan")
    max_eps = cfg.max_iterations
    while total_steps < cfg.total_env_steps and (max_eps is None or episode_idx < max_eps):
        episode_idx += 1
        traj = rollout_mod.rollout_episode(
            env, agent.policy, roll_rng, random_actions=total_steps < cfg.warmup_steps
        )
        total_steps += len(traj)
        ingest_episode(buf_main, buf_edge, traj, cfg.eta)

        if total_steps >= cfg.update_after:
            n_updates = max(int(len(traj) * cfg.updates_per_step), 1)
            for _ in range(n_updates):
                batch = buf_main.sample(cfg.batch_size)
                batch_edge = buf_edge.sample(cfg.batch_size) if len(buf_edge) > 0 else None
                ql1, ql2 = q_train_step(agent, batch)
                q_loss = 0.5 * (ql1 + ql2)
                lyap_batch = batch if cfg.lyapunov_batch_source == "main" else (batch_edge or batch)
                l_loss = lyap_mod.train_step(agent.lyapunov, lyap_batch, agent.policy, agent.rng)
                if agent.lyapunov.candidate == "value":
                    lyap_mod.soft_update(agent.lyapunov)
                # policy step; the same sample estimates feed the multiplier ascent
                noise_main = agent.rng.standard_normal((len(batch), agent.policy.action_dim))
                noise_edge = None
                if batch_edge is not None:
                    noise_edge = agent.rng.standard_normal((len(batch_edge), agent.policy.action_dim))
                pi_loss, grad, stats = policy_loss_and_grad(agent, batch, batch_edge, noise_main, noise_edge)
                _apply_policy_grad(agent, pi_loss, grad)
                _ascend_multipliers(agent, stats.mean_log_prob + cfg.target_entropy, stats.edge_residual)

        if cfg.eval_interval_episodes > 0 and episode_idx % cfg.eval_interval_episodes == 0:
            check_cfg = uub_verify.UubConfig(
                alpha3=cfg.alpha3,
                eta=cfg.eta,
                n_episodes=cfg.uub_check_episodes,
                n_action_samples=cfg.uub_n_action_samples,
            )
            lyap_rng = np.random.default_rng(check_seed + episode_idx)
            lfn = lyap_mod.make_lyapunov_fn(
                agent.lyapunov, agent.policy, cfg.uub_n_action_samples, lyap_rng
            )
            result = uub_verify.check_decrease(
                agent.policy, lfn, env, check_cfg, np.random.default_rng(check_seed + episode_idx)
            )
            residual = result.lhs - result.rhs if not result.vacuous else float("nan")
            if (
                cfg.stop_on_uub
                and not result.vacuous
                and residual < 0.0
                and episode_idx >= cfg.min_iterations
            ):
                log.append(
                    iteration=episode_idx,
                    episode_return=rollout_mod.episode_return(traj),
                    safety_cost=rollout_mod.episode_cost(traj),
                    violations=rollout_mod.episode_violations(traj),
                    beta=agent.beta,
                    **{"lambda": agent.lam},
                    q_loss=q_loss,
                    l_loss=l_loss,
                    policy_loss=pi_loss,
                    uub_residual=residual,
                )
                break

        log.append(
            iteration=episode_idx,
            episode_return=rollout_mod.episode_return(traj),
            safety_cost=rollout_mod.episode_cost(traj),
            violations=rollout_mod.episode_violations(traj),
            beta=agent.beta,
            **{"lambda": agent.lam},
            q_loss=q_loss,
            l_loss=l_loss,
            policy_loss=pi_loss,
            uub_residual=residual,
        )
    return log


def agent_to_dict(agent: LsacAgent) -> dict:
    return {
        "version": nets.CHECKPOINT_VERSION,
        "algorithm": "lsac",
        "policy": policy_mod.policy_to_dict(agent.policy),
        "q1": nets.net_to_dict(agent.q1),
        "q2": nets.net_to_dict(agent.q2),
        "lyapunov": lyap_mod.critic_to_dict(agent.lyapunov),
        "log_beta": agent.log_beta,
        "log_lambda": agent.log_lambda,
    }


def agent_from_dict(doc: dict, config: LsacConfig, rng: np.random.Generator) -> LsacAgent:
    pol = policy_mod.policy_from_dict(doc["policy"])
    q1 = nets.net_from_dict(doc["q1"])
    q2 = nets.net_from_dict(doc["q2"])
    lyap = lyap_mod.critic_from_dict(doc["lyapunov"], learning_rate=config.lyapunov_lr)
    return LsacAgent(
        policy=pol,
        q1=q1,
        q2=q2,
        q1_target=nets.clone_net(q1),
        q2_target=nets.clone_net(q2),
        lyapunov=lyap,
        log_beta=float(doc["log_beta"]),
        log_lambda=float(doc["log_lambda"]),
        policy_adam=AdamState.for_params(pol.net.n_params, config.actor_lr),
        q1_adam=AdamState.for_params(q1.n_params, config.critic_lr),
        q2_adam=AdamState.for_params(q2.n_params, config.critic_lr),
        config=config,
        rng=rng,
    )
