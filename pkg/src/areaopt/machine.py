"""Entropy-regularized machine policy optimization.

For a fixed human model, the optimal machine policy maximizing causal
entropy plus ``gamma`` times expected reward is a softmax over backward
soft-value tables.  The log of the root normalizer is the optimal objective
value itself, which the alternating loop reuses as a constraint threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import RewardFunction
from .pathtree import PathTree, union_tree
from .process import (HUMAN, MACHINE, DenseCausalTable, ProcessSpec,
                      causal_entropy, expect_function, unpack_trajectory)
from .structured import (HumanFlowView, StructuredHumanModel, log_sum_exp,
                         StructuredMachinePolicy, masked_dot)


@dataclass
class DenseSoftValues:
    """Backward soft values on explicit machine histories."""

    spec: ProcessSpec
    gamma: float
    step_log_value: list[np.ndarray]     # turn t: (n_machine_histories(t), |M|)
    log_partition: float


@dataclass
class StructuredSoftValues:
    """Backward soft values in compact form: per-turn off-tree values plus
    per-node corrections on the working prefix tree."""

    spec: ProcessSpec
    gamma: float
    step_log_value: np.ndarray           # (T, |M|)
    step_log_norm: np.ndarray            # (T,)
    tail_log_norm: np.ndarray            # (T+2,), tail[t] = sum_{tau>=t} step_log_norm
    tree: PathTree
    node_log_value: dict[tuple[int, int], float]
    node_log_norm: dict[int, float]
    reward_carry: np.ndarray             # (n_nodes,) accumulated scaled reward
    log_partition: float


SoftValues = DenseSoftValues | StructuredSoftValues


def backward_dense(human: DenseCausalTable, reward: RewardFunction,
                   gamma: float, cap: int | None = None) -> DenseSoftValues:
    """Soft values by explicit enumeration of machine histories."""
    if human.side != HUMAN:
        raise ValueError("expected a human table")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    spec = human.spec
    spec.check_cap(cap)
    reward.check(spec)
    H, M, T = spec.n_human, spec.n_machine, spec.horizon

    rvals = np.array([reward.evaluate(unpack_trajectory(spec, c))
                      for c in range(spec.n_trajectories)])
    # terminal: expected full reward over the final human response
    expected = (human.tables[T - 1] * rvals.reshape(-1, H)).sum(axis=1)
    log_value = gamma * expected.reshape(-1, M)
    values: list[np.ndarray] = [None] * T
    values[T - 1] = log_value
    for t in range(T - 1, 0, -1):
        marg = log_sum_exp(log_value, axis=1)            # over m_{t+1}
        cond = (human.tables[t - 1] * marg.reshape(-1, H)).sum(axis=1)
        log_value = cond.reshape(-1, M)
        values[t - 1] = log_value
    partition = float(log_sum_exp(values[0][0]))
    return DenseSoftValues(spec, gamma, values, partition)


def backward_structured(human: StructuredHumanModel | np.ndarray,
                        reward: RewardFunction, gamma: float) -> StructuredSoftValues:
    """Soft values in compact form; linear in the horizon.

    ``human`` is a structured model or a plain Markov conditional array of
    shape (T, |H|, |M|).  The reward must be a per-turn table plus optional
    exact-path bonuses.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if isinstance(human, StructuredHumanModel):
        spec = human.spec
        human_tree = human.tree
    else:
        human = np.asarray(human, dtype=float)
        T_, H_, M_ = human.shape
        spec = ProcessSpec(T_, H_, M_)
        human_tree = None
    reward.check(spec)
    T, H, M = spec.horizon, spec.n_human, spec.n_machine

    path_keys = [(p.path.human, p.path.machine) for p in reward.path_parts]
    tree = union_tree(spec, human_tree, path_keys)
    view = HumanFlowView(human, tree)

    # Off-tree: expected current-turn reward per machine action.
    rho = np.empty((T, M))
    for t in range(1, T + 1):
        rho[t - 1] = np.einsum("hm,hm->m", view.step_probs(t), reward.per_step[t - 1])
    step_log_value = gamma * rho
    step_log_norm = log_sum_exp(step_log_value, axis=1)
    tail = np.zeros(T + 2)
    for t in range(T, 0, -1):
        tail[t] = tail[t + 1] + step_log_norm[t - 1]

    # Accumulated scaled reward along each on-tree ride.
    bonus: dict[int, float] = {}
    for p in reward.path_parts:
        nid = tree.node_for((p.path.human, p.path.machine))
        bonus[nid] = bonus.get(nid, 0.0) + p.coefficient
    carry = np.zeros(len(tree))
    for nid in range(1, len(tree)):
        node = tree.nodes[nid]
        m, h = node.edge
        carry[nid] = (carry[node.parent]
                      + gamma * reward.per_step[node.level - 1, h, m]
                      + gamma * bonus.get(nid, 0.0))

    node_log_value: dict[tuple[int, int], float] = {}
    node_log_norm: dict[int, float] = {}
    for level in range(min(T, tree.n_levels - 1), -1, -1):
        for u in tree.at_level(level):
            if level == T:
                node_log_norm[u] = carry[u]
                continue
            lognum = tail[level + 2] + carry[u] + step_log_value[level]
            on_machine = tree.nodes[u].machine_actions()
            if on_machine:
                lognum = lognum.copy()
                for m in on_machine:
                    x = np.empty(H)
                    for h in range(H):
                        child = tree.child(u, m, h)
                        if child is not None:
                            x[h] = node_log_norm[child]
                        else:
                            x[h] = (tail[level + 2] + carry[u]
                                    + gamma * reward.per_step[level, h, m])
                    val = masked_dot(view.node_probs(u, m, level + 1), x)
                    node_log_value[(u, m)] = val
                    lognum[m] = val
            node_log_norm[u] = float(log_sum_exp(lognum))
    partition = node_log_norm[0]
    return StructuredSoftValues(spec, gamma, step_log_value, step_log_norm,
                                tail, tree, node_log_value, node_log_norm,
                                carry, partition)


def extract_policy(values: SoftValues):
    """Normalize soft values into the optimal machine policy."""
    if isinstance(values, DenseSoftValues):
        tables = []
        for log_value in values.step_log_value:
            shift = log_value - log_value.max(axis=1, keepdims=True)
            w = np.exp(shift)
            tables.append(w / w.sum(axis=1, keepdims=True))
        return DenseCausalTable(values.spec, MACHINE, tables)

    T, M = values.spec.horizon, values.spec.n_machine
    step_log_prob = values.step_log_value - values.step_log_norm[:, None]
    node_log_prob: dict[int, np.ndarray] = {}
    for level in range(min(T - 1, values.tree.n_levels - 1), -1, -1):
        for u in values.tree.at_level(level):
            lognum = (values.tail_log_norm[level + 2] + values.reward_carry[u]
                      + values.step_log_value[level])
            edited = False
            for m in values.tree.nodes[u].machine_actions():
                if not edited:
                    lognum = lognum.copy()
                    edited = True
                lognum[m] = values.node_log_value[(u, m)]
            node_log_prob[u] = lognum - log_sum_exp(lognum)
    return StructuredMachinePolicy(values.spec, step_log_prob, values.tree,
                                   node_log_prob)


def log_partition(values: SoftValues) -> float:
    """Log of the first-turn soft-value normalizer.

    Equals the optimal value of the regularized objective, i.e. the machine
    causal entropy plus ``gamma`` times expected reward at the extracted
    policy.
    """
    return values.log_partition


def machine_objective(human: DenseCausalTable, policy: DenseCausalTable,
                      reward: RewardFunction, gamma: float,
                      cap: int | None = None) -> float:
    """Regularized objective of an arbitrary policy, by enumeration."""
    ent = causal_entropy(MACHINE, human, policy, cap)
    mean_reward = expect_function(human, policy, reward.evaluate, cap)
    return ent + gamma * mean_reward


def decomposable_policy(human: StructuredHumanModel | np.ndarray,
                        reward: RewardFunction, gamma: float) -> np.ndarray:
    """Closed-form per-turn policy for fully decomposable problems.

    When the reward has no path bonuses and the human model carries no tree
    corrections, the optimal policy factors across turns:
    ``Q_t(m) proportional to exp(gamma * E[r_t(H_t, m) | m])``.
    Returns the (T, |M|) array of per-turn action probabilities.
    """
    if reward.path_parts:
        raise ValueError("closed form requires a purely decomposable reward")
    if isinstance(human, StructuredHumanModel):
        if len(human.tree) > 1:
            raise ValueError("closed form requires a tree-free human model")
        cond = np.exp(human.step_log_prob)
    else:
        cond = np.asarray(human, dtype=float)
    rho = np.einsum("thm,thm->tm", cond, reward.per_step)
    w = np.exp(gamma * rho - (gamma * rho).max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)
