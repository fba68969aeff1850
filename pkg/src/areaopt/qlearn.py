"""Finite-memory, turn-indexed tabular Q-learning baseline.

The machine scores each candidate action against the window of the last few
interactions plus the turn index, selects by softmax, and updates with the
standard one-step bootstrapped rule.  Works only with per-turn rewards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .features import RewardFunction
from .lca import LcaParams, lca_choose, lca_step
from .process import ProcessSpec, Trajectory

#: window slots before the episode provides real actions
PAD = -1


@dataclass(frozen=True)
class QlParams:
    learning_rate: float = 0.1
    discount: float = 0.8
    softmax_scale: float = 10.0
    memory: int = 1

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning rate must be in (0, 1]")
        if not 0 <= self.discount <= 1:
            raise ValueError("discount must be in [0, 1]")
        if self.softmax_scale <= 0:
            raise ValueError("softmax scale must be positive")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")


@dataclass
class QTable:
    """Sparse table keyed by (interaction window, turn, candidate action)."""

    spec: ProcessSpec
    params: QlParams
    values: dict = field(default_factory=dict)

    def get(self, window, t: int, m: int) -> float:
        return self.values.get((window, t, m), 0.0)

    def row(self, window, t: int) -> np.ndarray:
        return np.array([self.get(window, t, m) for m in range(self.spec.n_machine)])

    def set(self, window, t: int, m: int, value: float) -> None:
        self.values[(window, t, m)] = value


def initial_window(params: QlParams) -> tuple:
    return ((PAD,) * params.memory, (PAD,) * params.memory)


def shift_window(window, h: int, m: int) -> tuple:
    hs, ms = window
    return (hs[1:] + (h,), ms[1:] + (m,))


def ql_select(table: QTable, window, t: int, rng: np.random.Generator
              ) -> tuple[int, float]:
    """Sample an action with probability proportional to exp(scale * Q).

    Returns the action and the log-probability it was drawn with.
    """
    scores = table.params.softmax_scale * table.row(window, t)
    scores -= scores.max()
    probs = np.exp(scores)
    probs /= probs.sum()
    m = int(rng.choice(table.spec.n_machine, p=probs))
    return m, float(np.log(probs[m]))


def ql_update(table: QTable, window, m: int, h: int, step_reward: float,
              next_window, t: int) -> None:
    """One bootstrapped update; the final turn bootstraps from zero."""
    params = table.params
    if t < table.spec.horizon:
        future = float(table.row(next_window, t + 1).max())
    else:
        future = 0.0
    old = table.get(window, t, m)
    new = (1.0 - params.learning_rate) * old + params.learning_rate * (
        step_reward + params.discount * future)
    table.set(window, t, m, new)


@dataclass
class QlTraceRow:
    episode: int
    cumulative_samples: int
    avg_reward: float
    entropy_estimate: float


@dataclass
class QlRun:
    table: QTable
    rows: list[QlTraceRow]
    trajectories: list[Trajectory]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "cumulative_samples", "avg_reward",
                             "entropy_estimate"])
            for r in self.rows:
                writer.writerow([r.episode, r.cumulative_samples,
                                 f"{r.avg_reward:.12g}",
                                 f"{r.entropy_estimate:.12g}"])


def run_qlearning(spec: ProcessSpec, reward: RewardFunction, params: QlParams,
                  lca_params: LcaParams, episodes: int, seed,
                  stimulus_map: np.ndarray | None = None) -> QlRun:
    """Learn against the accumulator human for a number of episodes.

    Tracks the running mean episode reward and the empirical causal entropy
    of the machine's own realized action choices, -(1/E) sum log p(taken).
    """
    if reward.path_parts:
        raise ValueError("the baseline supports per-turn rewards only")
    if spec.n_machine != spec.n_human and stimulus_map is None:
        raise ValueError("unequal alphabets need an explicit stimulus map")
    if stimulus_map is None:
        stimulus_map = np.arange(spec.n_machine)

    rng = np.random.default_rng(seed)
    table = QTable(spec, params)
    rows: list[QlTraceRow] = []
    trajectories: list[Trajectory] = []
    total_reward = 0.0
    total_log_prob = 0.0
    for episode in range(1, episodes + 1):
        acc = np.full(spec.n_human, lca_params.initial_value)
        window = initial_window(params)
        hs: list[int] = []
        ms: list[int] = []
        ep_reward = 0.0
        for t in range(1, spec.horizon + 1):
            m, logp = ql_select(table, window, t, rng)
            total_log_prob += logp
            acc = lca_step(acc, int(stimulus_map[m]), lca_params, rng)
            h = lca_choose(acc, rng)
            step_reward = float(reward.per_step[t - 1, h, m])
            ep_reward += step_reward
            next_window = shift_window(window, h, m)
            ql_update(table, window, m, h, step_reward, next_window, t)
            window = next_window
            hs.append(h)
            ms.append(m)
        trajectories.append(Trajectory(tuple(hs), tuple(ms)))
        total_reward += ep_reward
        rows.append(QlTraceRow(episode, episode, total_reward / episode,
                               -total_log_prob / episode))
    return QlRun(table, rows, trajectories)
