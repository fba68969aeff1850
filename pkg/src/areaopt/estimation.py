"""Constrained maximum-entropy estimation of the human side.

Given the machine policy and moment constraints, the estimate is the causal
Gibbs model induced by dual variables that minimize a convex dual: a
backward recursion turns any dual vector into normalized conditionals, and
projected subgradient steps drive the feature moments to their targets.

Two lanes share one contract: a dense lane that enumerates histories (small
horizons, used as ground truth) and a structured lane whose work is linear
in the horizon for decomposable and prefix-anchored features.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .features import ConstraintSet
from .pathtree import PathTree, union_tree
from .process import (HUMAN, MACHINE, DenseCausalTable, ProcessSpec,
                      factorize_joint, causal_entropy, unpack_trajectory)
from .structured import (FlowResult, HumanFlowView, PolicyFlowView,
                         ResolvedFeature, StructuredHumanModel,
                         StructuredMachinePolicy, expected_value,
                         feature_prefixes, forward_flows, human_causal_entropy,
                         log_sum_exp, masked_dot, resolve_feature)


@dataclass
class DualVariables:
    """Multipliers for equality and inequality moment constraints.

    Inequality multipliers are kept nonnegative; both kinds enter the Gibbs
    exponent with positive sign for constraints normalized to E[g] >= c.
    """

    equality: np.ndarray
    inequality: np.ndarray

    @classmethod
    def zeros(cls, constraints: ConstraintSet) -> "DualVariables":
        return cls(np.zeros(len(constraints.equality)),
                   np.zeros(len(constraints.inequality)))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.equality, self.inequality])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_equality: int) -> "DualVariables":
        return cls(np.asarray(vec[:n_equality], dtype=float),
                   np.asarray(vec[n_equality:], dtype=float))

    def check(self) -> None:
        if not (np.isfinite(self.equality).all() and np.isfinite(self.inequality).all()):
            raise ValueError("non-finite dual variable")
        if (self.inequality < 0).any():
            raise ValueError("inequality multipliers must be nonnegative")


@dataclass
class EstimationOptions:
    """Dual solver controls.

    The base method is projected subgradient descent with the configured
    step schedule.  Because the dual is smooth, a safeguarded root-finding
    polish (finite-difference Newton on the moment map, counted against the
    same evaluation budget) periodically sharpens the iterate; it is what
    makes tight tolerances reachable and can be disabled.
    """

    learning_rate: float = 0.5
    schedule: str = "inverse-sqrt"     # or "constant"
    max_iters: int = 5000
    grad_tol: float = 1e-5
    moment_tol: float = 1e-4
    divergence_bound: float = 1e3
    polish: bool = True
    polish_every: int = 100
    polish_sweeps: int = 20
    patience: int = 250                # evaluations without progress before giving up

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_iters <= 0:
            raise ValueError("learning rate and iteration budget must be positive")
        if self.grad_tol <= 0 or self.moment_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.schedule not in ("inverse-sqrt", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def step_size(self, n: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        return self.learning_rate / math.sqrt(n)


# ---------------------------------------------------------------------------
# Dense lane.
# ---------------------------------------------------------------------------


@dataclass
class DenseBackward:
    table: DenseCausalTable
    root_log_norm: np.ndarray      # (|M|,) per-first-machine-action log-normalizer
    root_value: float              # policy-weighted sum of the root log-normalizers


class _DenseWork:
    """Per-problem cache for the dense lane: feature values per trajectory."""

    def __init__(self, policy: DenseCausalTable, constraints: ConstraintSet):
        if policy.side != MACHINE:
            raise ValueError("estimation conditions on a machine policy")
        constraints.check(policy.spec)
        self.policy = policy
        self.constraints = constraints
        self.spec = policy.spec
        self.spec.check_cap()
        n = self.spec.n_trajectories
        feats = constraints.features
        self.values = np.zeros((len(feats), n))
        for code in range(n):
            traj = unpack_trajectory(self.spec, code)
            for j, f in enumerate(feats):
                self.values[j, code] = f.evaluate(traj)
        self.logQ = policy.log_tables()

    def backward(self, duals: DualVariables) -> DenseBackward:
        spec = self.spec
        H, M, T = spec.n_human, spec.n_machine, spec.horizon
        lam = duals.vector()
        exponent = lam @ self.values if len(lam) else np.zeros(spec.n_trajectories)
        # terminal weights over full trajectories, then sweep turns backward
        log_cond = exponent.reshape(-1, H)
        tables: list[np.ndarray] = [None] * T
        log_marg = log_sum_exp(log_cond, axis=1)
        tables[T - 1] = _softmax_log(log_cond)
        root = log_marg
        for t in range(T - 1, 0, -1):
            q = self.policy.tables[t]                   # turn t+1, rows = (h^t, m^t)
            marg_next = log_marg.reshape(-1, M)
            cont = np.where(q > 0.0, q * marg_next, 0.0).sum(axis=1)
            log_cond = cont.reshape(-1, H)
            log_marg = log_sum_exp(log_cond, axis=1)
            tables[t - 1] = _softmax_log(log_cond)
            root = log_marg
        table = DenseCausalTable(spec, HUMAN, tables)
        q1 = self.policy.tables[0][0]
        value = masked_dot(q1, root)
        return DenseBackward(table, root, value)

    def moments(self, table: DenseCausalTable) -> np.ndarray:
        joint = factorize_joint(table, self.policy)
        mass = np.exp(joint.log_mass)
        return self.values @ mass


def _softmax_log(log_w: np.ndarray) -> np.ndarray:
    shift = log_w - log_w.max(axis=1, keepdims=True)
    w = np.exp(shift)
    return w / w.sum(axis=1, keepdims=True)


def backward_dense(policy: DenseCausalTable, constraints: ConstraintSet,
                   duals: DualVariables) -> DenseBackward:
    """Induced human model for one dual vector, by explicit enumeration."""
    duals.check()
    return _DenseWork(policy, constraints).backward(duals)


def feature_moments_dense(table: DenseCausalTable, policy: DenseCausalTable,
                          constraints: ConstraintSet) -> np.ndarray:
    work = _DenseWork(policy, constraints)
    return work.moments(table)


# ---------------------------------------------------------------------------
# Structured lane.
# ---------------------------------------------------------------------------


class _StructuredWork:
    """Per-problem cache for the structured lane.

    Builds the working prefix tree (union of every feature anchor and the
    policy's own corrected nodes) and binds feature payloads to its node ids.
    """

    def __init__(self, policy: StructuredMachinePolicy, constraints: ConstraintSet):
        constraints.check(policy.spec)
        self.policy = policy
        self.constraints = constraints
        self.spec = policy.spec
        groups = [feature_prefixes(f, self.spec) for f in constraints.features]
        self.tree = union_tree(self.spec, policy.tree, *groups)
        self.view = PolicyFlowView(policy, self.tree)
        self.resolved = [resolve_feature(f, self.tree, self.spec)
                         for f in constraints.features]
        T, H, M = self.spec.horizon, self.spec.n_human, self.spec.n_machine
        self.tables = np.zeros((len(self.resolved), T, H, M))
        for j, r in enumerate(self.resolved):
            if r.tables is not None:
                self.tables[j] = r.tables
        # per-node and per-(node, action) feature-value vectors
        self.node_vals: dict[int, np.ndarray] = {}
        self.machine_vals: dict[tuple[int, int], np.ndarray] = {}
        for j, r in enumerate(self.resolved):
            for nid, val in r.node_terms.items():
                vec = self.node_vals.setdefault(nid, np.zeros(len(self.resolved)))
                vec[j] += val
            for key, val in r.machine_terms.items():
                vec = self.machine_vals.setdefault(key, np.zeros(len(self.resolved)))
                vec[j] += val

    def backward(self, duals: DualVariables) -> StructuredHumanModel:
        spec, tree = self.spec, self.tree
        T, H, M = spec.horizon, spec.n_human, spec.n_machine
        lam = duals.vector()
        exponent = (np.tensordot(lam, self.tables, axes=1) if len(lam)
                    else np.zeros((T, H, M)))

        # Off-tree sweep: the continuation is a per-turn constant because the
        # policy is a per-turn product off the tree, so only scalars recurse.
        base = log_sum_exp(exponent, axis=1)           # (T, |M|)
        step_probs = np.exp(self.policy.step_log_prob)
        carries = np.empty(T)
        carry = 0.0
        for t in range(T - 1, -1, -1):
            carries[t] = carry
            carry = masked_dot(step_probs[t], base[t] + carry)
        log_w = exponent + carries[:, None, None]
        log_norm = base + carries[:, None]
        step_log_prob = exponent - base[:, None, :]

        # Accumulated exponents along each on-tree ride (parents precede
        # children in id order).
        D = np.zeros(len(tree))
        for nid in range(1, len(tree)):
            node = tree.nodes[nid]
            m, h = node.edge
            par = node.parent
            D[nid] = D[par] + exponent[node.level - 1, h, m]
            mv = self.machine_vals.get((par, m))
            if mv is not None:
                D[nid] += float(lam @ mv)
            nv = self.node_vals.get(nid)
            if nv is not None:
                D[nid] += float(lam @ nv)

        # Bottom-up node values and corrected conditionals.
        node_log_weight: dict[int, float] = {}
        node_log_prob: dict[tuple[int, int], np.ndarray] = {}
        root_log_norm = None
        root_value = 0.0
        for level in range(min(T, tree.n_levels - 1), -1, -1):
            for u in tree.at_level(level):
                if level == T:
                    node_log_weight[u] = D[u]
                    continue
                lorm = np.empty(M)
                for m in range(M):
                    mv = self.machine_vals.get((u, m))
                    shift = D[u] + (float(lam @ mv) if mv is not None else 0.0)
                    branch = shift + log_w[level, :, m]
                    edited = False
                    for h in range(H):
                        child = tree.child(u, m, h)
                        if child is not None:
                            if not edited:
                                branch = branch.copy()
                                edited = True
                            branch[h] = node_log_weight[child]
                    lorm[m] = log_sum_exp(branch)
                    if edited:
                        node_log_prob[(u, m)] = branch - lorm[m]
                value = masked_dot(self.view.node_probs(u, level + 1), lorm)
                if u == 0:
                    # kept as summary attributes, not per-node storage
                    root_log_norm = lorm
                    root_value = value
                else:
                    node_log_weight[u] = value

        model = StructuredHumanModel(spec, step_log_prob, log_norm, tree,
                                     node_log_prob, node_log_weight,
                                     root_log_norm)
        model.root_value = root_value
        return model

    def moments(self, model: StructuredHumanModel) -> np.ndarray:
        flows = forward_flows(HumanFlowView(model, self.tree), self.view,
                              self.tree, self.spec)
        return np.array([expected_value(r, flows, self.view, self.tree)
                         for r in self.resolved])


def backward_structured(policy: StructuredMachinePolicy,
                        constraints: ConstraintSet,
                        duals: DualVariables) -> StructuredHumanModel:
    """Induced human model for one dual vector, in compact form.

    Requires every feature to be decomposable or prefix-anchored and the
    policy to be a per-turn product off its own corrected nodes.
    """
    duals.check()
    return _StructuredWork(policy, constraints).backward(duals)


def feature_moments(model: StructuredHumanModel,
                    policy: StructuredMachinePolicy,
                    constraints: ConstraintSet) -> np.ndarray:
    """Expected feature values under the (model, policy) joint."""
    work = _StructuredWork(policy, constraints)
    return work.moments(model)


def deviation_survival(model: StructuredHumanModel,
                       policy: StructuredMachinePolicy, t: int) -> float:
    """Probability that the first t turns still ride a tracked support."""
    if t < 0 or t > model.spec.horizon:
        raise ValueError("turn index out of range")
    tree = model.tree
    flows = forward_flows(HumanFlowView(model, tree), PolicyFlowView(policy, tree),
                          tree, model.spec)
    return float(flows.on_mass[t])


# ---------------------------------------------------------------------------
# Dual problem: objective, gradient, projected subgradient descent.
# ---------------------------------------------------------------------------


def _make_work(policy, constraints):
    if isinstance(policy, DenseCausalTable):
        return _DenseWork(policy, constraints)
    if isinstance(policy, StructuredMachinePolicy):
        return _StructuredWork(policy, constraints)
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def _backward_any(work, duals):
    out = work.backward(duals)
    if isinstance(out, DenseBackward):
        return out.table, out.root_value
    return out, out.root_value


def dual_objective(policy, constraints: ConstraintSet, duals: DualVariables) -> float:
    """Convex dual value: policy-weighted root log-normalizer minus lam . c."""
    duals.check()
    work = _make_work(policy, constraints)
    _, value = _backward_any(work, duals)
    lam = duals.vector()
    return value - float(lam @ constraints.targets) if len(lam) else value


def dual_gradient(policy, constraints: ConstraintSet, duals: DualVariables) -> np.ndarray:
    """Moment mismatch E[feature] - target, the dual descent direction."""
    duals.check()
    work = _make_work(policy, constraints)
    model, _ = _backward_any(work, duals)
    return work.moments(model) - constraints.targets


def _projected_gradient(grad: np.ndarray, duals: DualVariables,
                        n_eq: int) -> np.ndarray:
    pg = grad.copy()
    for i in range(n_eq, len(grad)):
        if duals.inequality[i - n_eq] <= 0.0 and grad[i] > 0.0:
            pg[i] = 0.0
    return pg


def _residuals(moments: np.ndarray, targets: np.ndarray, n_eq: int) -> float:
    if len(moments) == 0:
        return 0.0
    eq = np.abs(moments[:n_eq] - targets[:n_eq]) if n_eq else np.zeros(0)
    ineq = np.maximum(0.0, targets[n_eq:] - moments[n_eq:])
    return float(max(eq.max() if n_eq else 0.0,
                     ineq.max() if len(ineq) else 0.0))


@dataclass
class DualSolution:
    duals: DualVariables
    model: object                      # DenseCausalTable or StructuredHumanModel
    converged: bool
    diverged: bool
    iterations: int
    objective: float
    grad_norm: float
    max_residual: float
    moments: np.ndarray


class _DualDriver:
    """Shared bookkeeping for the subgradient phase and the polish phase."""

    def __init__(self, work, options: EstimationOptions, writer):
        self.work = work
        self.options = options
        self.writer = writer
        self.targets = work.constraints.targets
        self.n_eq = work.constraints.n_equality
        self.evals = 0
        self.best = None
        self.best_at = 0

    def evaluate(self, duals: DualVariables):
        """One backward pass plus moments; tracks the best iterate seen."""
        self.evals += 1
        model, value = _backward_any(self.work, duals)
        moments = self.work.moments(model)
        lam = duals.vector()
        objective = value - float(lam @ self.targets) if len(lam) else value
        grad = moments - self.targets
        pg = _projected_gradient(grad, duals, self.n_eq)
        grad_norm = float(np.max(np.abs(pg))) if len(pg) else 0.0
        resid = _residuals(moments, self.targets, self.n_eq)
        if self.writer:
            self.writer.writerow([self.evals, f"{objective:.12g}",
                                  f"{grad_norm:.6e}", f"{resid:.6e}"])
        state = (duals, model, moments, objective, grad, grad_norm, resid)
        score = max(grad_norm, resid)
        if self.best is None or score < 0.999 * self.best[0]:
            self.best = (score, state)
            self.best_at = self.evals
        return state

    def done(self, grad_norm: float, resid: float) -> bool:
        return (grad_norm <= self.options.grad_tol
                and resid <= self.options.moment_tol)

    def stalled(self) -> bool:
        return self.evals - self.best_at > self.options.patience

    def budget_left(self) -> int:
        return self.options.max_iters - self.evals


def _polish(driver: _DualDriver, state) -> tuple:
    """Safeguarded Newton refinement of the stationarity conditions.

    The Jacobian of the moment map is estimated column by column with
    forward differences on the active constraints (all equalities plus
    inequalities that are tight or violated); steps are backtracked until
    the stationarity score improves.  Every moment evaluation counts
    against the solver budget.
    """
    options = driver.options
    n_eq = driver.n_eq
    for _ in range(options.polish_sweeps):
        duals, model, moments, objective, grad, grad_norm, resid = state
        score = max(grad_norm, resid)
        if driver.done(grad_norm, resid):
            return state
        n_ineq = len(duals.inequality)
        active = list(range(n_eq)) + [
            n_eq + i for i in range(n_ineq)
            if duals.inequality[i] > 0.0 or grad[n_eq + i] < 0.0]
        if not active or driver.budget_left() < len(active) + 2:
            return state
        lam0 = duals.vector()
        jac = np.empty((len(active), len(active)))
        ok = True
        for col, j in enumerate(active):
            delta = 1e-6 * max(1.0, abs(lam0[j]))
            lam_j = lam0.copy()
            lam_j[j] += delta
            probe = DualVariables.from_vector(lam_j, n_eq)
            _, _, _, _, grad_j, _, _ = driver.evaluate(probe)
            jac[:, col] = (grad_j[active] - grad[active]) / delta
        try:
            step = np.linalg.lstsq(jac, -grad[active], rcond=None)[0]
        except np.linalg.LinAlgError:
            return state
        if not np.isfinite(step).all():
            return state
        improved = None
        for scale in (1.0, 0.5, 0.25, 0.125, 0.0625):
            lam_new = lam0.copy()
            for idx, j in enumerate(active):
                lam_new[j] += scale * step[idx]
            lam_new[n_eq:] = np.maximum(0.0, lam_new[n_eq:])
            if float(np.max(np.abs(lam_new))) > options.divergence_bound:
                continue
            cand = driver.evaluate(DualVariables.from_vector(lam_new, n_eq))
            cand_score = max(cand[5], cand[6])
            if cand_score < score * (1.0 - 1e-6) or driver.done(cand[5], cand[6]):
                improved = cand
                break
            if driver.budget_left() < 1:
                return state
        if improved is None:
            return state
        state = improved
    return state


def solve_dual(policy, constraints: ConstraintSet,
               options: EstimationOptions | None = None,
               initial: DualVariables | None = None,
               trace_path=None) -> DualSolution:
    """Minimize the estimation dual by projected subgradient descent.

    Equality multipliers move freely; inequality multipliers are clipped at
    zero.  When enabled, the Newton polish runs periodically on the same
    evaluation budget.  Returns the best iterate seen (by stationarity plus
    feasibility) when the budget runs out, flagged as non-converged.  A
    runaway dual norm is reported as divergence, the usual signature of
    infeasible moments.
    """
    options = options or EstimationOptions()
    work = _make_work(policy, constraints)
    duals = initial if initial is not None else DualVariables.zeros(constraints)
    duals.check()
    n_eq = constraints.n_equality
    writer = fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "grad_norm", "max_residual"])

    driver = _DualDriver(work, options, writer)
    converged = diverged = False
    try:
        state = driver.evaluate(duals)
        step_count = 0
        while True:
            duals, model, moments, objective, grad, grad_norm, resid = state
            if driver.done(grad_norm, resid):
                converged = True
                break
            if driver.budget_left() <= 0 or driver.stalled():
                break
            if (options.polish and step_count > 0
                    and step_count % options.polish_every == 0):
                state = _polish(driver, state)
                duals, model, moments, objective, grad, grad_norm, resid = state
                if driver.done(grad_norm, resid):
                    converged = True
                    break
                if driver.budget_left() <= 0:
                    break
            step_count += 1
            eta = options.step_size(step_count)
            duals = DualVariables(
                duals.equality - eta * grad[:n_eq],
                np.maximum(0.0, duals.inequality - eta * grad[n_eq:]),
            )
            if (len(duals.vector()) and
                    float(np.max(np.abs(duals.vector()))) > options.divergence_bound):
                diverged = True
                break
            state = driver.evaluate(duals)
    finally:
        if fh:
            fh.close()

    if converged:
        duals, model, moments, objective, _, grad_norm, resid = state
        return DualSolution(duals, model, True, False, driver.evals, objective,
                            grad_norm, resid, moments)
    _, (bd, bm, bmom, bobj, _, bgn, bres) = driver.best
    return DualSolution(bd, bm, False, diverged, driver.evals, bobj, bgn,
                        bres, bmom)


@dataclass
class EstimationResult:
    model: object
    duals: DualVariables
    converged: bool
    diverged: bool
    iterations: int
    entropy: float
    duality_gap: float
    max_residual: float
    moments: np.ndarray


def estimate_human(policy, constraints: ConstraintSet,
                   options: EstimationOptions | None = None,
                   initial: DualVariables | None = None,
                   trace_path=None) -> EstimationResult:
    """Solve the dual and report the model with its entropy and duality gap.

    The gap is the dual value minus the Lagrangian at the returned model; it
    vanishes (up to numerics) at the exact optimum.
    """
    sol = solve_dual(policy, constraints, options, initial, trace_path)
    lam = sol.duals.vector()
    if isinstance(sol.model, StructuredHumanModel):
        tree = sol.model.tree
        hview = HumanFlowView(sol.model, tree)
        pview = PolicyFlowView(policy, tree)
        flows = forward_flows(hview, pview, tree, policy.spec)
        ent = human_causal_entropy(flows, hview, pview, tree, policy.spec)
    else:
        ent = causal_entropy(HUMAN, sol.model, policy)
    lagrangian = ent + (float(lam @ (sol.moments - constraints.targets))
                        if len(lam) else 0.0)
    gap = sol.objective - lagrangian
    return EstimationResult(sol.model, sol.duals, sol.converged, sol.diverged,
                            sol.iterations, ent, gap, sol.max_residual,
                            sol.moments)
