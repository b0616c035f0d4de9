import numpy as np
import pytest
from scipy import stats

from uubrl.buffers import (
    ReplayBuffer,
    Transition,
    edge_prefix_length,
    episodes_to_csv,
    ingest_episode,
)


def make_episode(costs, next_costs=None):
    """Chain of 1-d transitions carrying the given per-step costs."""
    n = len(costs)
    if next_costs is None:
        next_costs = list(costs[1:]) + [0.0]
    eps = []
    for t in range(n):
        eps.append(
            Transition(
                state=np.array([float(t)]),
                action=np.array([0.0]),
                reward=0.0,
                cost=float(costs[t]),
                next_state=np.array([float(t + 1)]),
                done=False,
                next_cost=float(next_costs[t]),
            )
        )
    return eps


def test_edge_prefix_matches_hand_trace():
    # costs (0, 5, 0, 7, 0) with eta=1: last edge visit at step 4 (1-indexed)
    flags = [c >= 1.0 for c in (0, 5, 0, 7, 0)]
    assert edge_prefix_length(flags) == 4


def test_edge_prefix_empty_when_never_in_edge():
    assert edge_prefix_length([False, False, False]) == 0


def test_ingest_counts_and_flags():
    main, edge = ReplayBuffer(100, seed=0), ReplayBuffer(100, seed=1)
    traj = make_episode([0, 5, 0, 7, 0])
    n_main, n_edge = ingest_episode(main, edge, traj, eta=1.0)
    assert (n_main, n_edge) == (5, 4)
    assert len(main) == 5 and len(edge) == 4
    assert [tr.in_edge for tr in traj] == [False, True, False, True, False]
    assert [tr.next_in_edge for tr in traj] == [True, False, True, False, False]


def test_ingest_all_safe_episode_adds_no_edge():
    main, edge = ReplayBuffer(10, seed=0), ReplayBuffer(10, seed=0)
    n_main, n_edge = ingest_episode(main, edge, make_episode([0.0, 0.0]), eta=1.0)
    assert (n_main, n_edge) == (2, 0)


def test_ingest_single_step_edge_episode():
    main, edge = ReplayBuffer(10, seed=0), ReplayBuffer(10, seed=0)
    n_main, n_edge = ingest_episode(main, edge, make_episode([3.0]), eta=1.0)
    assert (n_main, n_edge) == (1, 1)


def test_ingest_rejects_out_of_order():
    main, edge = ReplayBuffer(10, seed=0), ReplayBuffer(10, seed=0)
    traj = make_episode([0, 0, 0])
    traj[1], traj[2] = traj[2], traj[1]
    with pytest.raises(ValueError):
        ingest_episode(main, edge, traj, eta=1.0)


def test_flags_recomputable_from_cost_and_eta():
    main, edge = ReplayBuffer(10, seed=0), ReplayBuffer(10, seed=0)
    traj = make_episode([0.4, 1.7, 0.0])
    ingest_episode(main, edge, traj, eta=0.5)
    for tr in traj:
        assert tr.in_edge == (tr.cost >= 0.5)


def test_sampling_uniform_chi_square():
    buf = ReplayBuffer(10, seed=42)
    for tr in make_episode(range(8)):
        buf.add(tr)
    draws = 100_000
    counts = np.zeros(8)
    for _ in range(20):
        batch = buf.sample(draws // 20)
        idx = batch.states[:, 0].astype(int)
        counts += np.bincount(idx, minlength=8)
    chi2 = float(((counts - draws / 8) ** 2 / (draws / 8)).sum())
    # 4-sigma-ish quantile of chi-square with 7 dof
    assert chi2 < stats.chi2.ppf(1 - 6e-5, df=7)


def test_sampling_deterministic_under_seed():
    def draw():
        buf = ReplayBuffer(10, seed=7)
        for tr in make_episode(range(6)):
            buf.add(tr)
        return buf.sample(32).states

    assert np.array_equal(draw(), draw())


def test_sample_snapshot_not_affected_by_later_ingest():
    buf = ReplayBuffer(4, seed=0)
    for tr in make_episode([1, 2, 3, 4]):
        buf.add(tr)
    batch = buf.sample(16)
    before = batch.states.copy()
    for tr in make_episode([9, 9, 9, 9]):
        buf.add(tr)  # overwrites the ring
    assert np.array_equal(batch.states, before)


def test_sample_empty_raises():
    with pytest.raises(ValueError):
        ReplayBuffer(4, seed=0).sample(1)


def test_fifo_eviction():
    buf = ReplayBuffer(3, seed=0)
    for tr in make_episode([10, 20, 30, 40]):
        buf.add(tr)
    assert len(buf) == 3
    costs = sorted(buf.all().costs.tolist())
    assert costs == [20.0, 30.0, 40.0]


def test_clear_idempotent_and_fresh():
    buf = ReplayBuffer(8, seed=0)
    for tr in make_episode([1, 2]):
        buf.add(tr)
    buf.clear()
    buf.clear()
    assert len(buf) == 0
    with pytest.raises(ValueError):
        buf.sample(1)
    for tr in make_episode([5]):
        buf.add(tr)
    assert len(buf) == 1 and buf.sample(3).costs[0] == 5.0


def test_edge_prefix_property_after_many_episodes():
    rng = np.random.default_rng(0)
    main, edge = ReplayBuffer(10_000, seed=0), ReplayBuffer(10_000, seed=0)
    eta = 1.0
    for _ in range(50):
        costs = rng.uniform(0, 2, size=rng.integers(1, 12))
        ingest_episode(main, edge, make_episode(costs), eta)
    if len(edge):
        batch = edge.all()
        # every edge-buffer transition belongs to a prefix ending at an edge visit
        assert np.all((batch.costs >= eta) == batch.in_edge.astype(bool))


def test_episodes_to_csv_round_trip(tmp_path):
    eps = [make_episode([0, 2]), make_episode([1])]
    path = tmp_path / "traj.csv"
    episodes_to_csv(eps, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "episode,t,s0,a0,r,c,done"
    assert len(lines) == 4
