"""Replay storage: the main buffer and the edge buffer.

The edge buffer holds, per episode, the prefix of transitions up to the last
visit to the edge set (states whose observed constraint cost reaches the
threshold eta). Membership uses the sampled cost as the estimator of the
expected cost, which is the only thing the data gives pointwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nets import Array


@dataclass
class Transition:
    state: Array
    action: Array
    reward: float
    cost: float
    next_state: Array
    done: bool  # true environment termination only; timeouts stay bootstrappable
    next_cost: float = 0.0
    next_reward: float = 0.0
    in_edge: bool = False
    next_in_edge: bool = False


@dataclass
class TransitionBatch:
    states: Array
    actions: Array
    rewards: Array
    costs: Array
    next_states: Array
    next_rewards: Array
    dones: Array  # float 0/1
    in_edge: Array  # float 0/1
    next_in_edge: Array  # float 0/1

    def __len__(self) -> int:
        return self.states.shape[0]


class ReplayBuffer:
    """FIFO ring of transitions with uniform-with-replacement sampling."""

    def __init__(self, capacity: int, seed: int | None = None):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._rng = np.random.default_rng(seed)
        self._size = 0
        self._head = 0
        self._cols: dict[str, Array] | None = None

    def __len__(self) -> int:
        return self._size

    def _allocate(self, tr: Transition) -> None:
        n, m = len(tr.state), len(tr.action)
        cap = self.capacity
        self._cols = {
            "states": np.empty((cap, n)),
            "actions": np.empty((cap, m)),
            "rewards": np.empty(cap),
            "costs": np.empty(cap),
            "next_states": np.empty((cap, n)),
            "next_rewards": np.empty(cap),
            "dones": np.empty(cap),
            "in_edge": np.empty(cap),
            "next_in_edge": np.empty(cap),
        }

    def add(self, tr: Transition) -> None:
        if self._cols is None:
            self._allocate(tr)
        cols = self._cols
        i = self._head
        cols["states"][i] = tr.state
        cols["actions"][i] = tr.action
        cols["rewards"][i] = tr.reward
        cols["costs"][i] = tr.cost
        cols["next_states"][i] = tr.next_state
        cols["next_rewards"][i] = tr.next_reward
        cols["dones"][i] = float(tr.done)
        cols["in_edge"][i] = float(tr.in_edge)
        cols["next_in_edge"][i] = float(tr.next_in_edge)
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, transitions: list[Transition]) -> None:
        for tr in transitions:
            self.add(tr)

    def sample(self, batch_size: int) -> TransitionBatch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self._rng.integers(0, self._size, size=batch_size)
        cols = self._cols
        return TransitionBatch(
            states=cols["states"][idx],
            actions=cols["actions"][idx],
            rewards=cols["rewards"][idx],
            costs=cols["costs"][idx],
            next_states=cols["next_states"][idx],
            next_rewards=cols["next_rewards"][idx],
            dones=cols["dones"][idx],
            in_edge=cols["in_edge"][idx],
            next_in_edge=cols["next_in_edge"][idx],
        )

    def clear(self) -> None:
        self._size = 0
        self._head = 0

    def all(self) -> TransitionBatch:
        return self.sample_indices(np.arange(self._size))

    def sample_indices(self, idx: Array) -> TransitionBatch:
        if self._cols is None:
            raise ValueError("buffer is empty")
        cols = self._cols
        return TransitionBatch(
            **{k: cols[k][idx] for k in cols}
        )


def edge_prefix_length(in_edge_flags: Array) -> int:
    """Number of leading transitions up to the last edge-set visit (0 if none).

    This single rule is shared by training ingest and by the verifier so the
    two sampling paths agree exactly.
    """
    hits = np.flatnonzero(np.asarray(in_edge_flags, dtype=bool))
    return int(hits[-1] + 1) if hits.size else 0


def ingest_episode(
    main: ReplayBuffer,
    edge: ReplayBuffer,
    trajectory: list[Transition],
    eta: float,
) -> tuple[int, int]:
    """Store an episode: all transitions in the main buffer, the prefix up to
    the last edge visit in the edge buffer. Edge flags are (re)computed from
    stored costs against eta."""
    if not trajectory:
        return 0, 0
    for a, b in zip(trajectory, trajectory[1:]):
        if not np.array_equal(a.next_state, b.state):
            raise ValueError("trajectory transitions are not in time order")
    for tr in trajectory:
        tr.in_edge = tr.cost >= eta
        tr.next_in_edge = tr.next_cost >= eta
    main.extend(trajectory)
    n_edge = edge_prefix_length([tr.in_edge for tr in trajectory])
    edge.extend(trajectory[:n_edge])
    return len(trajectory), n_edge


def episodes_to_csv(episodes: list[list[Transition]], path: str) -> None:
    """Per-step CSV rows (episode, t, s..., a..., r, c, done)."""
    if not episodes or not episodes[0]:
        raise ValueError("no transitions to write")
    n = len(episodes[0][0].state)
    m = len(episodes[0][0].action)
    header = (
        ["episode", "t"]
        + [f"s{i}" for i in range(n)]
        + [f"a{i}" for i in range(m)]
        + ["r", "c", "done"]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ep_idx, episode in enumerate(episodes):
            for t, tr in enumerate(episode, start=1):
                writer.writerow(
                    [ep_idx, t]
                    + [repr(v) for v in tr.state]
                    + [repr(v) for v in tr.action]
                    + [repr(tr.reward), repr(tr.cost), int(tr.done)]
                )
