import numpy as np
import pytest

from uubrl import lsac as lsac_mod
from uubrl import nets, policy as policy_mod
from uubrl.buffers import TransitionBatch
from uubrl.envs import PointCircle
from uubrl.lsac import (
    LsacConfig,
    make_lsac_agent,
    multiplier_residuals,
    multiplier_step,
    policy_loss_and_grad,
    policy_objective,
    policy_train_step,
    q_loss_and_grad,
    q_targets,
    q_train_step,
    train,
)
from uubrl.lyapunov import critic_value
from uubrl.testkit import finite_diff_grad, relative_grad_error


def small_agent(seed=0, hidden=(6,), **cfg_kwargs):
    env = PointCircle(episode_length=20)
    cfg = LsacConfig(hidden_sizes=hidden, batch_size=8, **cfg_kwargs)
    agent = make_lsac_agent(env, cfg, np.random.default_rng(seed))
    return agent, env


def random_batch(rng, n=8, state_dim=4, action_dim=2, dones=None):
    return TransitionBatch(
        states=rng.normal(size=(n, state_dim)),
        actions=np.clip(rng.normal(size=(n, action_dim)) * 0.5, -0.99, 0.99),
        rewards=rng.normal(size=n),
        costs=rng.uniform(0, 1, n),
        next_states=rng.normal(size=(n, state_dim)),
        next_rewards=rng.normal(size=n),
        dones=np.zeros(n) if dones is None else dones,
        in_edge=rng.integers(0, 2, n).astype(float),
        next_in_edge=rng.integers(0, 2, n).astype(float),
    )


def lift_output_layers(agent):
    """Move rectified/tiny output layers away from their kinks so the
    finite-difference probes sit on smooth ground."""
    for net in (agent.q1, agent.q2, agent.q1_target, agent.q2_target):
        net.weights[-1] *= 200.0
    agent.lyapunov.net.weights[-1] *= 200.0
    agent.lyapunov.net.biases[-1][...] = 0.3
    if agent.lyapunov.target_net is not None:
        agent.lyapunov.target_net.weights[-1] *= 200.0
        agent.lyapunov.target_net.biases[-1][...] = 0.3


def test_q_regresses_to_reward_when_gamma_zero():
    agent, _ = small_agent(seed=1, gamma=0.0)
    rng = np.random.default_rng(2)
    batch = random_batch(rng)
    batch.rewards[...] = 0.8
    agent.q1_adam.learning_rate = agent.q2_adam.learning_rate = 1e-2
    for _ in range(600):
        l1, l2 = q_train_step(agent, batch)
    assert l1 < 1e-4 and l2 < 1e-4


def test_identical_critics_same_losses():
    agent, _ = small_agent(seed=3)
    agent.q2 = nets.clone_net(agent.q1)
    agent.q2_target = nets.clone_net(agent.q1_target)
    rng = np.random.default_rng(4)
    batch = random_batch(rng)
    noise = rng.standard_normal((len(batch), 2))
    y1, y2 = q_targets(agent, batch, noise)
    l1, _ = q_loss_and_grad(agent.q1, batch, y1)
    l2, _ = q_loss_and_grad(agent.q2, batch, y2)
    assert l1 == pytest.approx(l2)


def test_q_loss_gradient_matches_finite_differences():
    agent, _ = small_agent(seed=5)
    lift_output_layers(agent)
    rng = np.random.default_rng(6)
    batch = random_batch(rng, n=6)
    noise = rng.standard_normal((6, 2))
    targets, _ = q_targets(agent, batch, noise)
    _, grad = q_loss_and_grad(agent.q1, batch, targets)
    layout = agent.q1.layout

    def f(theta):
        loss, _ = q_loss_and_grad(
            nets.unflatten(nets.FlatParams(theta, layout)), batch, targets
        )
        return loss

    fd = finite_diff_grad(f, nets.flatten(agent.q1).values, h=1e-5)
    assert relative_grad_error(grad.values, fd) <= 1e-5


def test_q_nonfinite_loss_rejected():
    agent, _ = small_agent(seed=7)
    rng = np.random.default_rng(8)
    batch = random_batch(rng)
    batch.rewards[0] = np.nan
    with pytest.raises(nets.NumericsError):
        q_train_step(agent, batch)


def test_policy_gradient_matches_fd_full_lagrangian():
    agent, _ = small_agent(seed=9, hidden=(6,))
    lift_output_layers(agent)
    agent.log_beta = float(np.log(0.7))
    agent.log_lambda = float(np.log(1.3))
    rng = np.random.default_rng(10)
    batch_main = random_batch(rng, n=6)
    batch_edge = random_batch(rng, n=5)
    noise_main = rng.standard_normal((6, 2))
    noise_edge = rng.standard_normal((5, 2))
    loss, grad, stats = policy_loss_and_grad(agent, batch_main, batch_edge, noise_main, noise_edge)
    theta0 = nets.flatten(agent.policy.net).values
    assert loss == pytest.approx(
        policy_objective(agent, theta0, batch_main, batch_edge, noise_main, noise_edge)
    )

    def f(theta):
        return policy_objective(agent, theta, batch_main, batch_edge, noise_main, noise_edge)

    fd = finite_diff_grad(f, theta0, h=1e-6)
    assert relative_grad_error(grad.values, fd) <= 1e-4


def test_policy_gradient_term_isolation_min_q_only():
    agent, _ = small_agent(seed=11, hidden=(6,))
    lift_output_layers(agent)
    agent.log_beta = -80.0  # beta ~ 0
    rng = np.random.default_rng(12)
    batch_main = random_batch(rng, n=6)
    noise_main = rng.standard_normal((6, 2))
    _, grad, _ = policy_loss_and_grad(agent, batch_main, None, noise_main, None)

    def min_q_objective(theta):
        pol = agent.policy.with_flat(theta)
        action = policy_mod.sample(pol, batch_main.states, noise_main).action
        x = np.concatenate([batch_main.states, action], axis=-1)
        q1 = nets.forward(agent.q1, x)[:, 0]
        q2 = nets.forward(agent.q2, x)[:, 0]
        return float(np.mean(-np.minimum(q1, q2)))

    fd = finite_diff_grad(min_q_objective, nets.flatten(agent.policy.net).values, h=1e-6)
    assert relative_grad_error(grad.values, fd) <= 1e-4


def test_policy_gradient_empty_edge_equals_lambda_zero():
    agent, _ = small_agent(seed=13, hidden=(6,))
    rng = np.random.default_rng(14)
    batch_main = random_batch(rng, n=6)
    noise_main = rng.standard_normal((6, 2))
    _, g_no_edge, _ = policy_loss_and_grad(agent, batch_main, None, noise_main, None)
    agent.log_lambda = -80.0  # lambda ~ 0
    batch_edge = random_batch(rng, n=4)
    noise_edge = rng.standard_normal((4, 2))
    _, g_lam0, _ = policy_loss_and_grad(agent, batch_main, batch_edge, noise_main, noise_edge)
    assert np.allclose(g_no_edge.values, g_lam0.values, atol=1e-30)


def test_double_q_swap_leaves_policy_gradient_unchanged():
    agent, _ = small_agent(seed=15, hidden=(6,))
    rng = np.random.default_rng(16)
    batch_main = random_batch(rng, n=6)
    noise_main = rng.standard_normal((6, 2))
    _, g1, _ = policy_loss_and_grad(agent, batch_main, None, noise_main, None)
    agent.q1, agent.q2 = agent.q2, agent.q1
    _, g2, _ = policy_loss_and_grad(agent, batch_main, None, noise_main, None)
    assert np.allclose(g1.values, g2.values)


def test_multiplier_beta_gradient_zero_at_target_entropy():
    agent, _ = small_agent(seed=17)
    rng = np.random.default_rng(18)
    batch = random_batch(rng, n=64)
    noise = rng.standard_normal((64, 2))
    log_probs = policy_mod.sample(agent.policy, batch.states, noise).log_prob
    agent.config.target_entropy = -float(np.mean(log_probs))
    r_beta, _ = multiplier_residuals(agent, batch, None, noise, None)
    assert r_beta == pytest.approx(0.0, abs=1e-12)


def test_multiplier_lambda_decreases_when_condition_satisfied():
    agent, _ = small_agent(seed=19)
    rng = np.random.default_rng(20)
    batch_main = random_batch(rng, n=8)
    batch_edge = random_batch(rng, n=8)
    # force a strongly satisfied decrease condition: big stored values
    batch_edge.costs[...] = 0.0
    batch_edge.in_edge[...] = 1.0
    batch_edge.next_in_edge[...] = 0.0  # successor leaves the edge: residual -L_c(s,a)
    lift_output_layers(agent)
    lam_before = agent.lam
    multiplier_step(agent, batch_main, batch_edge)
    assert agent.lam < lam_before


def test_multiplier_lambda_frozen_without_edge_data():
    agent, _ = small_agent(seed=21)
    rng = np.random.default_rng(22)
    lam_before = agent.lam
    multiplier_step(agent, random_batch(rng), None)
    assert agent.lam == lam_before


def test_multiplier_residual_matches_hand_computation():
    agent, _ = small_agent(seed=23)
    rng = np.random.default_rng(24)
    batch_edge = random_batch(rng, n=3)
    noise_main = rng.standard_normal((8, 2))
    noise_edge = rng.standard_normal((3, 2))
    batch_main = random_batch(rng, n=8)
    _, r_lambda = multiplier_residuals(agent, batch_main, batch_edge, noise_main, noise_edge)
    a_next = policy_mod.sample(agent.policy, batch_edge.next_states, noise_edge).action
    l_next = critic_value(agent.lyapunov, batch_edge.next_states, a_next)
    l_curr = critic_value(agent.lyapunov, batch_edge.states, batch_edge.actions)
    expect = np.mean(
        l_next * batch_edge.next_in_edge
        - (l_curr - agent.config.alpha3 * batch_edge.costs) * batch_edge.in_edge
    )
    assert r_lambda == pytest.approx(float(expect))


def test_multipliers_stay_positive():
    agent, _ = small_agent(seed=25)
    rng = np.random.default_rng(26)
    for _ in range(30):
        multiplier_step(agent, random_batch(rng), random_batch(rng, n=4))
        assert agent.beta > 0.0 and agent.lam > 0.0


def test_target_tracking_contraction():
    agent, _ = small_agent(seed=27)
    tau = agent.config.tau
    gap0 = np.linalg.norm(
        nets.flatten(agent.q1).values - nets.flatten(agent.q1_target).values
    )
    # separate the nets first
    agent.q1.weights[0] += 1.0
    gap0 = np.linalg.norm(nets.flatten(agent.q1).values - nets.flatten(agent.q1_target).values)
    n = 25
    for _ in range(n):
        nets.polyak_update(agent.q1_target, agent.q1, tau)
    gap_n = np.linalg.norm(nets.flatten(agent.q1).values - nets.flatten(agent.q1_target).values)
    assert gap_n == pytest.approx((1 - tau) ** n * gap0, rel=1e-9)


def test_train_zero_iterations_is_noop():
    agent, env = small_agent(seed=28, max_iterations=0, total_env_steps=10_000)
    theta_before = nets.flatten(agent.policy.net).values.copy()
    log = train(agent, env, seed=0)
    assert len(log) == 0
    assert np.array_equal(nets.flatten(agent.policy.net).values, theta_before)


def test_train_deterministic_under_seed():
    def run():
        env = PointCircle(episode_length=20)
        cfg = LsacConfig(
            hidden_sizes=(8,),
            batch_size=16,
            total_env_steps=240,
            warmup_steps=60,
            update_after=100,
            eval_interval_episodes=5,
            uub_check_episodes=2,
            uub_n_action_samples=2,
        )
        agent = make_lsac_agent(env, cfg, np.random.default_rng(77))
        log = train(agent, env, seed=123)
        return log.rows

    rows_a, rows_b = run(), run()
    assert np.array_equal(np.array(rows_a, dtype=float), np.array(rows_b, dtype=float), equal_nan=True)
    assert len(rows_a) == 12  # 240 steps / 20-step episodes


def test_train_smoke_losses_finite():
    env = PointCircle(episode_length=20)
    cfg = LsacConfig(
        hidden_sizes=(8,),
        batch_size=16,
        total_env_steps=400,
        warmup_steps=60,
        update_after=80,
        eval_interval_episodes=50,
    )
    agent = make_lsac_agent(env, cfg, np.random.default_rng(29))
    log = train(agent, env, seed=5)
    assert len(log) == 20
    for name in ("q_loss", "l_loss", "policy_loss"):
        assert np.isfinite(log.column(name)[-1])
    assert all(v > 0 for v in log.column("beta"))


def test_agent_checkpoint_round_trip():
    agent, env = small_agent(seed=30)
    doc = lsac_mod.agent_to_dict(agent)
    clone = lsac_mod.agent_from_dict(doc, agent.config, np.random.default_rng(0))
    states = np.random.default_rng(1).normal(size=(3, 4))
    assert np.allclose(
        policy_mod.mean_action(agent.policy, states),
        policy_mod.mean_action(clone.policy, states),
    )
    assert clone.log_lambda == agent.log_lambda
