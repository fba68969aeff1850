"""Deliberately naive brute-force references used by the test suite.

Everything here enumerates trajectories and works in plain probability
space.  None of it shares code with the production recursions; agreement
between the two is what the tests check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import ConstraintSet, RewardFunction
from .process import (DenseCausalTable, ProcessSpec, Trajectory,
                      pack_history)


@dataclass
class OracleBudget:
    max_trajectories: int = 100_000
    max_gradient_iters: int = 20_000
    tolerance: float = 1e-8

    def __post_init__(self):
        if (self.max_trajectories <= 0 or self.max_gradient_iters <= 0
                or self.tolerance <= 0):
            raise ValueError("budget fields must be positive")


class BudgetExceededError(RuntimeError):
    pass


def enumerate_trajectories(spec: ProcessSpec, budget: OracleBudget | None = None):
    """Every trajectory exactly once, lexicographic in (human seq, machine seq)."""
    budget = budget or OracleBudget()
    if spec.n_trajectories > budget.max_trajectories:
        raise BudgetExceededError(
            f"{spec.n_trajectories} trajectories exceed budget "
            f"{budget.max_trajectories}")

    def sequences(length, size):
        if length == 0:
            yield ()
            return
        for head in range(size):
            for tail in sequences(length - 1, size):
                yield (head,) + tail

    for hs in sequences(spec.horizon, spec.n_human):
        for ms in sequences(spec.horizon, spec.n_machine):
            yield Trajectory(hs, ms)


def trajectory_probability(P: DenseCausalTable, Q: DenseCausalTable,
                           traj: Trajectory) -> float:
    """Product of the conditional factors along one trajectory."""
    prob = 1.0
    for t in range(1, P.spec.horizon + 1):
        hq = pack_history(P.spec, "machine", traj.human[:t - 1], traj.machine[:t - 1])
        prob *= Q.tables[t - 1][hq, traj.machine[t - 1]]
        hp = pack_history(P.spec, "human", traj.human[:t - 1], traj.machine[:t])
        prob *= P.tables[t - 1][hp, traj.human[t - 1]]
    return prob


def expectation(P: DenseCausalTable, Q: DenseCausalTable, fn,
                budget: OracleBudget | None = None) -> float:
    """Sum of probability times value over every trajectory."""
    total = 0.0
    for traj in enumerate_trajectories(P.spec, budget):
        p = trajectory_probability(P, Q, traj)
        if p > 0.0:
            total += p * fn(traj)
    return total


def causal_log_loss(side: str, P: DenseCausalTable, Q: DenseCausalTable,
                    budget: OracleBudget | None = None) -> float:
    """E[-log of one side's causally conditioned product] by enumeration."""
    table = P if side == "human" else Q

    def neg_log(traj):
        total = 0.0
        for t in range(1, P.spec.horizon + 1):
            if side == "human":
                hist = pack_history(P.spec, "human", traj.human[:t - 1],
                                    traj.machine[:t])
                total -= np.log(table.tables[t - 1][hist, traj.human[t - 1]])
            else:
                hist = pack_history(P.spec, "machine", traj.human[:t - 1],
                                    traj.machine[:t - 1])
                total -= np.log(table.tables[t - 1][hist, traj.machine[t - 1]])
        return total

    return expectation(P, Q, neg_log, budget)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, len(v) + 1)
    cond = u + (1.0 - css) / idx > 0
    rho = idx[cond][-1]
    theta = (1.0 - css[rho - 1]) / rho
    return np.maximum(v + theta, 0.0)


def _machine_objective_and_grad(P: DenseCausalTable, Q: DenseCausalTable,
                                reward: RewardFunction, gamma: float,
                                budget: OracleBudget | None):
    """Objective H(machine) + gamma E[r] and its gradient in every policy row."""
    spec = P.spec
    floor = 1e-300
    grads = [np.zeros_like(tab) for tab in Q.tables]
    objective = 0.0
    for traj in enumerate_trajectories(spec, budget):
        p = trajectory_probability(P, Q, traj)
        if p <= 0.0:
            continue
        logq = 0.0
        for t in range(1, spec.horizon + 1):
            hist = pack_history(spec, "machine", traj.human[:t - 1],
                                traj.machine[:t - 1])
            logq += np.log(max(Q.tables[t - 1][hist, traj.machine[t - 1]], floor))
        value = -logq + gamma * reward.evaluate(traj)
        objective += p * value
        for t in range(1, spec.horizon + 1):
            hist = pack_history(spec, "machine", traj.human[:t - 1],
                                traj.machine[:t - 1])
            m = traj.machine[t - 1]
            q = max(Q.tables[t - 1][hist, m], floor)
            grads[t - 1][hist, m] += p / q * (value - 1.0)
    return objective, grads


def machine_optimum(P: DenseCausalTable, reward: RewardFunction, gamma: float,
                    budget: OracleBudget | None = None,
                    step: float = 0.05):
    """Projected gradient ascent over all per-history action simplices.

    Independent of the backward-recursion solution; used to confirm its
    optimality.  Returns (policy, objective, converged).
    """
    budget = budget or OracleBudget()
    spec = P.spec
    Q = DenseCausalTable.uniform(spec, "machine")
    objective = None
    converged = False
    for _ in range(budget.max_gradient_iters):
        objective, grads = _machine_objective_and_grad(P, Q, reward, gamma, budget)
        move = 0.0
        new_tables = []
        for t in range(spec.horizon):
            tab = np.empty_like(Q.tables[t])
            for row in range(tab.shape[0]):
                tab[row] = project_simplex(Q.tables[t][row] + step * grads[t][row])
                move = max(move, float(np.max(np.abs(tab[row] - Q.tables[t][row]))))
            new_tables.append(tab)
        Q = DenseCausalTable(spec, "machine", new_tables)
        if move <= budget.tolerance:
            converged = True
            break
    objective, _ = _machine_objective_and_grad(P, Q, reward, gamma, budget)
    return Q, objective, converged


def duality_gap(Q: DenseCausalTable, constraints: ConstraintSet,
                duals, P: DenseCausalTable,
                budget: OracleBudget | None = None) -> float:
    """Dual value minus the Lagrangian at ``P``, all by enumeration.

    Nonnegative whenever ``P`` maximizes the Lagrangian at ``duals``; zero at
    a primal-dual optimal pair.
    """
    lam = duals.vector()
    feats = constraints.features
    targets = constraints.targets

    # Dual value: recompute the backward weights naively, trajectory by
    # trajectory, as nested expectations in plain probability space.
    spec = Q.spec

    def log_weight(hs: tuple[int, ...], ms: tuple[int, ...]) -> float:
        """log of the backward weight at the post-human-turn prefix (hs, ms)."""
        t = len(hs)
        if t == spec.horizon:
            traj = Trajectory(hs, ms)
            return float(sum(l * f.evaluate(traj) for l, f in zip(lam, feats)))
        hist = pack_history(spec, "machine", hs, ms)
        total = 0.0
        for m in range(spec.n_machine):
            qm = Q.tables[t][hist, m]
            if qm <= 0.0:
                continue
            inner = [log_weight(hs + (h,), ms + (m,)) for h in range(spec.n_human)]
            total += qm * np.logaddexp.reduce(inner)
        return total

    dual_value = 0.0
    for m in range(spec.n_machine):
        qm = Q.tables[0][0, m]
        if qm <= 0.0:
            continue
        vals = [log_weight((h,), (m,)) for h in range(spec.n_human)]
        dual_value += qm * np.logaddexp.reduce(vals)
    dual_value -= float(lam @ targets) if len(lam) else 0.0

    entropy = causal_log_loss("human", P, Q, budget)
    moments = np.array([expectation(P, Q, f.evaluate, budget) for f in feats])
    lagrangian = entropy + (float(lam @ (moments - targets)) if len(lam) else 0.0)
    return dual_value - lagrangian
