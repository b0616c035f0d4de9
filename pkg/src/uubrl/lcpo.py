"""On-policy trust-region optimization with a safety constraint.

Each iteration linearizes the return objective and the edge-set decrease
constraint around the current policy, bounds the step by a KL ball measured
in the Fisher metric, and solves the resulting quadratic program through its
two-multiplier dual in closed form. Infeasible iterations fall back to the
steepest constraint-descent step inside the same KL ball. A backtracking
line search re-checks the sampled conditions before any parameters move.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lyapunov as lyap_mod
from . import nets
from . import policy as policy_mod
from . import rollout as rollout_mod
from .buffers import Transition, edge_prefix_length
from .envs.base import SafeEnv
from .lyapunov import LyapunovCritic
from .nets import AdamState, Array, FlatParams, MlpNet
from .policy import SquashedGaussianPolicy
from .runlog import RunLog
from .lsac import LSAC_COLUMNS

LCPO_COLUMNS = LSAC_COLUMNS + ("feasible", "lambda_star", "beta_star", "backtracks")


class CgError(RuntimeError):
    """Conjugate gradients failed (breakdown or no convergence)."""


class InfeasibleStepError(RuntimeError):
    """The linearized constrained step has no solution inside the KL ball."""

    def __init__(self, h: float, ncurv: float, delta: float):
        super().__init__(
            f"infeasible step: h={h:.6g}, g_L^T H^-1 g_L={ncurv:.6g}, delta={delta:.6g}"
        )
        self.h = h
        self.ncurv = ncurv
        self.delta = delta


@dataclass
class CgResult:
    x: Array
    residual_norm: float
    n_iters: int
    converged: bool


def conjugate_gradient(fvp_oracle, b: Array, max_iters: int = 100, tol: float = 1e-8) -> CgResult:
    """Solve H x = b for symmetric positive-definite H given only H*v products."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CgResult(x, 0.0, 0, True)
    for k in range(max_iters):
        hp = fvp_oracle(p)
        curve = float(p @ hp)
        if curve <= 0.0:
            raise CgError(f"non-positive curvature {curve:.3g} in CG direction at iter {k}")
        alpha = rs / curve
        x += alpha * p
        r -= alpha * hp
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * b_norm:
            return CgResult(x, float(np.sqrt(rs_new)), k + 1, True)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CgResult(x, float(np.sqrt(rs)), max_iters, False)


@dataclass
class TrustRegionStep:
    g_q: FlatParams
    g_l: FlatParams
    h: float
    delta: float
    z: float
    ncurv: float
    q: float
    lambda_star: float
    beta_star: float
    direction: FlatParams


def dual_value(lam: float, beta: float, q: float, z: float, ncurv: float, h: float, delta: float) -> float:
    """Dual objective of the linearized step problem; minimized over
    lam >= 0, beta > 0. Derived directly from the Lagrangian of the primal."""
    quad = q - 2.0 * lam * z + lam**2 * ncurv
    return quad / (2.0 * beta) - lam * h + beta * delta


def is_feasible(h: float, ncurv: float, delta: float) -> bool:
    """The linear constraint can be met inside the KL ball iff h <= 0 or the
    steepest constraint descent reaches -h within the ball."""
    return h <= 0.0 or h * h <= 2.0 * delta * ncurv


def solve_dual(
    g_q: FlatParams,
    g_l: FlatParams,
    h: float,
    delta: float,
    fvp_oracle,
    cg_iters: int = 100,
    cg_tol: float = 1e-8,
    require_cg_convergence: bool = True,
) -> TrustRegionStep:
    """Closed-form dual of the linearized step problem.

    Raises InfeasibleStepError when no point of the KL ball satisfies the
    linearized constraint, and CgError when the inner solves do not reach
    tolerance (soft-disabled for training loops via the flag).
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")

    def solve(b: Array) -> Array:
        if not np.any(b):
            return np.zeros_like(b)
        res = conjugate_gradient(fvp_oracle, b, cg_iters, cg_tol)
        if require_cg_convergence and not res.converged:
            raise CgError(
                f"CG stopped at residual {res.residual_norm:.3e} after {res.n_iters} iterations"
            )
        return res.x

    v_q = solve(g_q.values)
    v_l = solve(g_l.values)
    q = float(g_q.values @ v_q)
    z = float(g_q.values @ v_l)
    ncurv = float(g_l.values @ v_l)
    if not is_feasible(h, ncurv, delta):
        raise InfeasibleStepError(h, ncurv, delta)

    if q <= 1e-300:
        # degenerate objective: satisfy the constraint with the smallest step
        lam_star, beta_star = 0.0, float("inf")
        direction = -(h / ncurv) * v_l if h > 0.0 and ncurv > 0.0 else np.zeros_like(g_q.values)
        return TrustRegionStep(
            g_q, g_l, h, delta, z, ncurv, q, lam_star, beta_star, FlatParams(direction, g_q.layout)
        )

    beta_plain = float(np.sqrt(q / (2.0 * delta)))
    candidates: list[tuple[float, float]] = []
    if ncurv <= 1e-300:
        candidates.append((0.0, beta_plain))
    else:
        if z + beta_plain * h <= 0.0:
            candidates.append((0.0, beta_plain))
        margin = 2.0 * delta - h * h / ncurv
        resid = q - z * z / ncurv  # >= 0 by Cauchy-Schwarz in the H^-1 metric
        if margin > 1e-300 and resid >= 0.0:
            beta_a = float(np.sqrt(max(resid, 0.0) / margin))
            if beta_a > 0.0:
                lam_a = (z + beta_a * h) / ncurv
                if lam_a > 0.0:
                    candidates.append((lam_a, beta_a))
        if not candidates:
            candidates.append((0.0, beta_plain))

    lam_star, beta_star = min(
        candidates, key=lambda lb: dual_value(lb[0], lb[1], q, z, ncurv, h, delta)
    )
    direction = (v_q - lam_star * v_l) / beta_star
    return TrustRegionStep(
        g_q, g_l, h, delta, z, ncurv, q, lam_star, beta_star, FlatParams(direction, g_q.layout)
    )


def recovery_step(
    g_l: FlatParams,
    delta: float,
    fvp_oracle,
    cg_iters: int = 100,
    cg_tol: float = 1e-8,
    require_cg_convergence: bool = True,
) -> FlatParams:
    """Steepest descent on the constraint inside the KL ball:
    -sqrt(2 delta / (g_L^T H^-1 g_L)) * H^-1 g_L."""
    if not np.any(g_l.values):
        raise ValueError("recovery needs a nonzero constraint gradient")
    res = conjugate_gradient(fvp_oracle, g_l.values, cg_iters, cg_tol)
    if require_cg_convergence and not res.converged:
        raise CgError(
            f"CG stopped at residual {res.residual_norm:.3e} after {res.n_iters} iterations"
        )
    ncurv = float(g_l.values @ res.x)
    return FlatParams(-np.sqrt(2.0 * delta / ncurv) * res.x, g_l.layout)


# ---------------------------------------------------------------------------
# on-policy machinery


@dataclass
class ValueCritic:
    net: MlpNet
    adam: AdamState
    gamma: float


def make_value_critic(
    state_dim: int, hidden_sizes: tuple[int, ...], rng: np.random.Generator,
    gamma: float = 0.99, learning_rate: float = 1e-4,
) -> ValueCritic:
    net = nets.init_mlp([state_dim, *hidden_sizes, 1], rng)
    return ValueCritic(net, AdamState.for_params(net.n_params, learning_rate), gamma)


def value_of(critic: ValueCritic, states: Array) -> Array:
    return nets.forward(critic.net, states)[:, 0]


def fit_value(
    critic: ValueCritic,
    states: Array,
    targets: Array,
    epochs: int,
    minibatch: int,
    rng: np.random.Generator,
) -> float:
    """Least-squares regression of returns; returns the final epoch's mean loss."""
    n = states.shape[0]
    loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, minibatch):
            idx = order[start : start + minibatch]
            pred, trace = nets.forward_trace(critic.net, states[idx])
            diff = pred[:, 0] - targets[idx]
            losses.append(float(0.5 * np.mean(diff**2)))
            grad, _ = nets.backward_from_trace(critic.net, trace, (diff / len(idx))[:, None])
            new_values, _ = nets.adam_step(nets.flatten(critic.net).values, grad.values, critic.adam)
            nets.write_flat(critic.net, new_values)
        loss = float(np.mean(losses))
    return loss


def discounted_returns(rewards: Array, gamma: float) -> Array:
    out = np.empty_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


@dataclass
class GradientEstimate:
    g_q: FlatParams
    g_l: FlatParams
    h: float
    states: Array
    actions: Array
    advantages: Array
    disc_weights: Array
    logp_old: Array
    surrogate_old: float
    edge_states: Array
    edge_actions: Array
    edge_psi: Array
    edge_weights: Array
    edge_logp_old: Array


def estimate_gradients(
    policy: SquashedGaussianPolicy,
    value_critic: ValueCritic,
    lyapunov: LyapunovCritic,
    episodes: list[list[Transition]],
    edge_prefixes: list[list[Transition]],
    alpha3: float,
    gamma: float,
    eta: float,
    safety_discount: float | None = None,
) -> GradientEstimate:
    """Likelihood-ratio gradients of the return objective and the sampled
    decrease constraint, with a fitted state-value baseline.

    The objective gradient keeps the per-step discount weights, so it is an
    unbiased estimate of the discounted-return gradient up to episode
    truncation. An empty edge set gives (g_L, h) = (0, 0): the constraint is
    inactive.
    """
    if not episodes or all(len(ep) == 0 for ep in episodes):
        raise ValueError("gradient estimation needs at least one non-empty episode")
    n_episodes = len(episodes)
    states_list, actions_list, adv_list, w_list = [], [], [], []
    for ep in episodes:
        rewards = np.array([tr.reward for tr in ep])
        s = np.array([tr.state for tr in ep])
        g = discounted_returns(rewards, gamma)
        adv = g - value_of(value_critic, s)
        states_list.append(s)
        actions_list.append(np.array([tr.action for tr in ep]))
        adv_list.append(adv)
        w_list.append(gamma ** np.arange(len(ep)) / n_episodes)
    states = np.concatenate(states_list)
    actions = np.concatenate(actions_list)
    advantages = np.concatenate(adv_list)
    disc_weights = np.concatenate(w_list)
    logp_old = policy_mod.log_prob(policy, states, actions)
    g_q = policy_mod.weighted_logprob_grad(policy, states, actions, disc_weights * advantages)
    surrogate_old = float(np.sum(disc_weights * advantages))

    layout = g_q.layout
    flat_edge = [tr for pre in edge_prefixes for tr in pre]
    if not flat_edge:
        zeros = FlatParams(np.zeros_like(g_q.values), layout)
        empty_s = np.zeros((0, states.shape[1]))
        empty_a = np.zeros((0, actions.shape[1]))
        empty = np.zeros(0)
        return GradientEstimate(
            g_q, zeros, 0.0, states, actions, advantages, disc_weights, logp_old,
            surrogate_old, empty_s, empty_a, empty, empty, empty,
        )

    e_states = np.array([tr.state for tr in flat_edge])
    e_actions = np.array([tr.action for tr in flat_edge])
    e_next = np.array([tr.next_state for tr in flat_edge])
    e_costs = np.array([tr.cost for tr in flat_edge])
    in_edge = (e_costs >= eta).astype(float)
    next_in_edge = np.array([tr.next_cost >= eta for tr in flat_edge], dtype=float)
    l_curr = lyap_mod.critic_value(lyapunov, e_states)
    l_next = lyap_mod.critic_value(lyapunov, e_next)
    psi = l_next * next_in_edge - (l_curr - alpha3 * e_costs) * in_edge
    if safety_discount is not None:
        t_idx = np.concatenate([np.arange(len(pre)) for pre in edge_prefixes])
        weights = safety_discount**t_idx
        weights = weights / weights.mean()
    else:
        weights = np.ones(len(flat_edge))
    h = float(np.mean(weights * psi))
    g_l = policy_mod.weighted_logprob_grad(
        policy, e_states, e_actions, weights * psi / len(flat_edge)
    )
    edge_logp_old = policy_mod.log_prob(policy, e_states, e_actions)
    return GradientEstimate(
        g_q, g_l, h, states, actions, advantages, disc_weights, logp_old, surrogate_old,
        e_states, e_actions, psi, weights, edge_logp_old,
    )


def constraint_estimate(policy: SquashedGaussianPolicy, est: GradientEstimate) -> float:
    """Importance-weighted estimate of the decrease constraint under a
    candidate policy, from the behaviour-policy samples."""
    if est.edge_states.shape[0] == 0:
        return 0.0
    logp_new = policy_mod.log_prob(policy, est.edge_states, est.edge_actions)
    ratio = np.exp(logp_new - est.edge_logp_old)
    return float(np.mean(est.edge_weights * ratio * est.edge_psi))


def surrogate_return(policy: SquashedGaussianPolicy, est: GradientEstimate) -> float:
    logp_new = policy_mod.log_prob(policy, est.states, est.actions)
    ratio = np.exp(logp_new - est.logp_old)
    return float(np.sum(est.disc_weights * ratio * est.advantages))


@dataclass
class LineSearchResult:
    theta: Array
    accepted: bool
    backtracks: int
    kl: float
    constraint: float


def line_search(
    policy: SquashedGaussianPolicy,
    direction: FlatParams,
    est: GradientEstimate,
    delta: float,
    max_backtracks: int = 10,
    mode: str = "auto",
) -> LineSearchResult:
    """Halve the step until the sampled conditions hold: KL inside the ball,
    the constraint estimate non-positive (or improved while recovering), and,
    in normal mode, no loss in the importance-weighted surrogate return.
    Returns the unchanged parameters when every backtrack fails."""
    if mode not in ("auto", "normal", "recovery"):
        raise ValueError(f"unknown line search mode '{mode}'")
    improve_only = mode == "recovery" or (mode == "auto" and est.h > 0.0)
    theta_old = nets.flatten(policy.net).values
    if not np.any(direction.values):
        return LineSearchResult(theta_old, True, 0, 0.0, est.h)
    for j in range(max_backtracks):
        candidate_theta = theta_old + 0.5**j * direction.values
        candidate = policy.with_flat(candidate_theta)
        kl = policy_mod.kl_divergence(candidate, policy, est.states)
        if kl > delta:
            continue
        h_new = constraint_estimate(candidate, est)
        if improve_only:
            ok = h_new <= est.h
        else:
            ok = h_new <= 0.0 and surrogate_return(candidate, est) >= est.surrogate_old - 1e-10
        if ok:
            return LineSearchResult(candidate_theta, True, j, kl, h_new)
    return LineSearchResult(theta_old, False, max_backtracks, 0.0, est.h)


# ---------------------------------------------------------------------------
# full training loop


@dataclass
class LcpoConfig:
    policy_hidden: tuple[int, ...] = (64, 32)
    value_hidden: tuple[int, ...] = (256, 128)
    lyapunov_hidden: tuple[int, ...] = (256, 256)
    batch_size: int = 10_000
    rollout_len: int = 500
    value_lr: float = 1e-4
    lyapunov_lr: float = 1e-4
    gamma: float = 0.99
    alpha3: float = 0.2
    delta: float = 0.01
    eta: float = 0.01
    safety_budget_d: float = 10.0
    safety_discount: float | None = None
    damping: float = 1e-5
    cg_iters: int = 100
    cg_tol: float = 1e-8
    max_backtracks: int = 10
    value_epochs: int = 5
    value_minibatch: int = 256
    lyapunov_epochs: int = 5
    lyapunov_minibatch: int = 256
    n_iterations: int = 100
    fvp_subsample: int = 2048


@dataclass
class LcpoAgent:
    policy: SquashedGaussianPolicy
    value_critic: ValueCritic
    lyapunov: LyapunovCritic
    config: LcpoConfig
    rng: np.random.Generator


def make_lcpo_agent(env: SafeEnv, config: LcpoConfig, rng: np.random.Generator) -> LcpoAgent:
    pol = policy_mod.make_policy(
        env.state_dim, env.action_low, env.action_high, tuple(config.policy_hidden), rng
    )
    value = make_value_critic(
        env.state_dim, tuple(config.value_hidden), rng, config.gamma, config.value_lr
    )
    lyap = lyap_mod.make_lyapunov_critic(
        env.state_dim, 0, tuple(config.lyapunov_hidden), "cost", rng,
        gamma=config.gamma, learning_rate=config.lyapunov_lr,
    )
    return LcpoAgent(pol, value, lyap, config, rng)


def _fit_lyapunov(agent: LcpoAgent, states: Array, costs: Array) -> float:
    cfg = agent.config
    n = states.shape[0]
    loss = float("nan")
    for _ in range(cfg.lyapunov_epochs):
        order = agent.rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.lyapunov_minibatch):
            idx = order[start : start + cfg.lyapunov_minibatch]
            batch_loss, grad = lyap_mod.loss_and_grad(agent.lyapunov, states[idx], costs[idx])
            losses.append(batch_loss)
            new_values, _ = nets.adam_step(
                nets.flatten(agent.lyapunov.net).values, grad.values, agent.lyapunov.adam
            )
            nets.write_flat(agent.lyapunov.net, new_values)
        loss = float(np.mean(losses))
    return loss


def train(
    agent: LcpoAgent,
    env: SafeEnv,
    seed: int,
    log: RunLog | None = None,
) -> RunLog:
    """Iterate: collect an on-policy batch, fit baselines, linearize, take the
    dual or recovery step through the line search, clear the batch."""
    cfg = agent.config
    if log is None:
        log = RunLog(LCPO_COLUMNS)
    seq = np.random.SeedSequence(seed)
    s_env, s_roll, s_fit = seq.spawn(3)
    env.reset(seed=int(s_env.generate_state(1)[0] % 2**31))
    roll_rng = np.random.default_rng(s_roll)
    fit_rng = np.random.default_rng(s_fit)

    for iteration in range(1, cfg.n_iterations + 1):
        episodes: list[list[Transition]] = []
        steps = 0
        while steps < cfg.batch_size:
            traj = rollout_mod.rollout_episode(
                env, agent.policy, roll_rng, max_steps=min(cfg.rollout_len, env.episode_length)
            )
            episodes.append(traj)
            steps += len(traj)

        all_states = np.concatenate([[tr.state for tr in ep] for ep in episodes])
        all_costs = np.concatenate([[tr.cost for tr in ep] for ep in episodes])
        returns = np.concatenate(
            [discounted_returns(np.array([tr.reward for tr in ep]), cfg.gamma) for ep in episodes]
        )
        l_loss = _fit_lyapunov(agent, all_states, all_costs)

        edge_prefixes = []
        for ep in episodes:
            n = edge_prefix_length([tr.cost >= cfg.eta for tr in ep])
            if n > 0:
                edge_prefixes.append(ep[:n])

        est = estimate_gradients(
            agent.policy, agent.value_critic, agent.lyapunov, episodes, edge_prefixes,
            cfg.alpha3, cfg.gamma, cfg.eta, cfg.safety_discount,
        )
        v_loss = fit_value(
            agent.value_critic, all_states, returns, cfg.value_epochs, cfg.value_minibatch, fit_rng
        )

        fvp_states = all_states
        if cfg.fvp_subsample and all_states.shape[0] > cfg.fvp_subsample:
            idx = fit_rng.choice(all_states.shape[0], cfg.fvp_subsample, replace=False)
            fvp_states = all_states[idx]
        layout = est.g_q.layout

        def fvp(v: Array) -> Array:
            return policy_mod.fisher_vector_product(
                agent.policy, fvp_states, FlatParams(v, layout), cfg.damping
            ).values

        feasible = True
        lambda_star = beta_star = float("nan")
        mode = "auto"
        try:
            step = solve_dual(
                est.g_q, est.g_l, est.h, cfg.delta, fvp,
                cfg.cg_iters, cfg.cg_tol, require_cg_convergence=False,
            )
            direction = step.direction
            lambda_star, beta_star = step.lambda_star, step.beta_star
        except InfeasibleStepError:
            feasible = False
            mode = "recovery"
            direction = recovery_step(
                est.g_l, cfg.delta, fvp, cfg.cg_iters, cfg.cg_tol, require_cg_convergence=False
            )
        result = line_search(
            agent.policy, direction, est, cfg.delta, cfg.max_backtracks, mode=mode
        )
        nets.write_flat(agent.policy.net, result.theta)

        ep_returns = [rollout_mod.episode_return(ep) for ep in episodes]
        ep_costs = [rollout_mod.episode_cost(ep) for ep in episodes]
        ep_viol = [rollout_mod.episode_violations(ep) for ep in episodes]
        log.append(
            iteration=iteration,
            episode_return=float(np.mean(ep_returns)),
            safety_cost=float(np.mean(ep_costs)),
            violations=float(np.mean(ep_viol)),
            beta=float("nan"),
            **{"lambda": float("nan")},
            q_loss=v_loss,
            l_loss=l_loss,
            policy_loss=-est.surrogate_old,
            uub_residual=est.h,
            feasible=int(feasible),
            lambda_star=lambda_star,
            beta_star=beta_star,
            backtracks=result.backtracks,
        )
    return log


def agent_to_dict(agent: LcpoAgent) -> dict:
    return {
        "version": nets.CHECKPOINT_VERSION,
        "algorithm": "lcpo",
        "policy": policy_mod.policy_to_dict(agent.policy),
        "value": nets.net_to_dict(agent.value_critic.net),
        "lyapunov": lyap_mod.critic_to_dict(agent.lyapunov),
    }


def agent_from_dict(doc: dict, config: LcpoConfig, rng: np.random.Generator) -> LcpoAgent:
    pol = policy_mod.policy_from_dict(doc["policy"])
    vnet = nets.net_from_dict(doc["value"])
    value = ValueCritic(vnet, AdamState.for_params(vnet.n_params, config.value_lr), config.gamma)
    lyap = lyap_mod.critic_from_dict(doc["lyapunov"], learning_rate=config.lyapunov_lr)
    return LcpoAgent(pol, value, lyap, config, rng)
