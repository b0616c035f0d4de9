"""Independent oracles used by the test suites.

Everything here is deliberately simple and slow: central finite differences,
dense linear solves, and explicit distribution iteration on tiny tabular
MDPs. None of it shares numerical code with the modules it validates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs.base import SafeEnv
from .nets import Array


def finite_diff_grad(f, x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("objective returned a non-finite value during differencing")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_grad_error(analytic: Array, reference: Array) -> float:
    """Max absolute deviation scaled by the reference magnitude."""
    scale = max(float(np.max(np.abs(reference))), 1e-8)
    return float(np.max(np.abs(analytic - reference))) / scale


@dataclass
class TabularMdp:
    """A tiny finite MDP: transitions[s, a, s'], rewards[s, a], costs[s, a]."""

    transitions: Array
    rewards: Array
    costs: Array
    discount: float
    initial_dist: Array

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.costs = np.asarray(self.costs, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        row_sums = self.transitions.sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def closed_loop(self, policy_table: Array) -> Array:
        """State-to-state transition matrix under a stochastic policy table."""
        return np.einsum("sa,sat->st", policy_table, self.transitions)

    def policy_reward(self, policy_table: Array) -> Array:
        return np.einsum("sa,sa->s", policy_table, self.rewards)

    def policy_cost(self, policy_table: Array) -> Array:
        return np.einsum("sa,sa->s", policy_table, self.costs)


def exact_state_values(mdp: TabularMdp, policy_table: Array) -> Array:
    """v = (I - gamma P_pi)^{-1} r_pi, the discounted state values."""
    if mdp.discount >= 1.0:
        raise ValueError("discount must be below 1 for the linear solve")
    p = mdp.closed_loop(policy_table)
    r = mdp.policy_reward(policy_table)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * p, r)


def exact_q_values(mdp: TabularMdp, policy_table: Array) -> Array:
    v = exact_state_values(mdp, policy_table)
    return mdp.rewards + mdp.discount * np.einsum("sat,t->sa", mdp.transitions, v)


def exact_return(mdp: TabularMdp, policy_table: Array) -> float:
    return float(mdp.initial_dist @ exact_state_values(mdp, policy_table))


def discounted_visitation(mdp: TabularMdp, policy_table: Array) -> Array:
    """d(s) = sum_t gamma^{t-1} P(s_t = s), unnormalized."""
    p = mdp.closed_loop(policy_table)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * p.T, mdp.initial_dist)


def exact_policy_gradient(mdp: TabularMdp, policy_table: Array) -> Array:
    """dJ / dpi(a|s) for the discounted return: visitation(s) * Q(s, a)."""
    d = discounted_visitation(mdp, policy_table)
    q = exact_q_values(mdp, policy_table)
    return d[:, None] * q


def exact_uub_quantities(
    mdp: TabularMdp,
    policy_table: Array,
    l_table: Array,
    eta: float,
    alpha3: float,
    horizon: int,
) -> tuple[float, float]:
    """Both sides of the edge-set decrease inequality, by exact enumeration.

    The state marginals are iterated from the initial distribution; the
    averaging distribution runs over the first N steps, N being the last
    instant (up to the horizon) with positive edge-set probability.
    """
    l_table = np.asarray(l_table, dtype=float)
    p_pi = mdp.closed_loop(policy_table)
    c_pi = mdp.policy_cost(policy_table)
    edge = (c_pi >= eta).astype(float)

    marginals = [mdp.initial_dist.copy()]
    for _ in range(horizon - 1):
        marginals.append(marginals[-1] @ p_pi)
    edge_prob = [float(m @ edge) for m in marginals]
    positive = [t for t, p in enumerate(edge_prob, start=1) if p > 0.0]
    if not positive:
        return 0.0, 0.0
    n_max = positive[-1]
    mu = np.mean(marginals[:n_max], axis=0)

    expected_next = p_pi @ (l_table * edge)  # E_{s'|s} L(s') 1_edge(s')
    lhs = float(mu @ (expected_next - l_table * edge))
    rhs = float(-alpha3 * (mu @ (c_pi * edge)))
    return lhs, rhs


class TabularEnv(SafeEnv):
    """Lift a TabularMdp to the continuous-interface protocol.

    States are one-hot vectors; the scalar action in [-1, 1] is binned into
    the discrete actions by equal sub-intervals, so a squashed Gaussian
    policy induces a well-defined action distribution over the table.
    """

    def __init__(self, mdp: TabularMdp, episode_length: int, seed: int | None = None):
        super().__init__(episode_length, seed)
        self.mdp = mdp
        self.state_dim = mdp.n_states
        self.action_dim = 1
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])
        self._s = 0

    def action_to_index(self, action: Array) -> int:
        edges = np.linspace(-1.0, 1.0, self.mdp.n_actions + 1)[1:-1]
        return int(np.searchsorted(edges, float(action[0]), side="right"))

    def _initial_state(self) -> Array:
        self._s = int(self._rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))
        return self._one_hot(self._s)

    def _one_hot(self, s: int) -> Array:
        out = np.zeros(self.mdp.n_states)
        out[s] = 1.0
        return out

    def state_index(self, state: Array) -> int:
        return int(np.argmax(state))

    def reward(self, state: Array) -> float:
        # per-step reward/cost depend on the pending action; step() overrides
        return 0.0

    def constraint_cost(self, state: Array) -> float:
        s = self.state_index(state)
        return float(np.min(self.mdp.costs[s]))

    def _default_push_direction(self) -> Array:
        return np.zeros(self.mdp.n_states)

    def step(self, action: Array):
        # action-dependent reward/cost make the generic driver unsuitable
        from .envs.base import StepResult

        if self._state is None:
            raise RuntimeError("step called before reset")
        a = self.action_to_index(np.asarray(action, dtype=float))
        s = self._s
        self._t += 1
        reward = float(self.mdp.rewards[s, a])
        cost = float(self.mdp.costs[s, a])
        s_next = int(self._rng.choice(self.mdp.n_states, p=self.mdp.transitions[s, a]))
        self._s = s_next
        self._state = self._one_hot(s_next)
        timeout = self._t >= self.episode_length
        return StepResult(
            next_state=self._state.copy(),
            reward=reward,
            constraint_cost=cost,
            done=timeout,
            info={
                "t": self._t,
                "timeout": timeout,
                "exit": False,
                "next_cost": float(np.min(self.mdp.costs[s_next])),
            },
        )


def sample_mean_stderr(samples: Array) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n == 0:
        return 0.0, 0.0
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(samples.mean()), se


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Binomial confidence interval that behaves at the 0/1 boundaries."""
    if trials == 0:
        return 0.0, 1.0
    phat = successes / trials
    denom = 1.0 + z**2 / trials
    center = (phat + z**2 / (2 * trials)) / denom
    half = z * np.sqrt(phat * (1 - phat) / trials + z**2 / (4 * trials**2)) / denom
    return max(0.0, center - half), min(1.0, center + half)
