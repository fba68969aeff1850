"""The alternating loop: acquire moments, estimate the human, optimize the
machine, monitored by the entropy-regularized expected reward.

Each round adds one inequality constraint tying the next human estimate to
the value the current policy already achieves; that forces the monitor to be
nondecreasing when moments are exact.  The constraint's threshold is the
current soft-value log-partition, which equals the needed expectation
exactly, so no extra integration is required.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .estimation import (DualVariables, EstimationOptions, EstimationResult,
                         estimate_human)
from .features import (CompositeFeature, ConstraintSet, Feature,
                       RewardFunction, prefix_key)
from .lca import LcaParams, SampleBatch, empirical_moments, sample_interactions
from .machine import (StructuredSoftValues, backward_structured, extract_policy,
                      log_partition)
from .pathtree import union_tree
from .process import DenseCausalTable, ProcessSpec, Trajectory, factorize_joint
from .structured import (HumanFlowView, PolicyFlowView, StructuredHumanModel,
                         StructuredMachinePolicy, expected_value,
                         feature_prefixes, forward_flows,
                         machine_causal_entropy, resolve_feature)

#: accepted forms of the data-generating human behavior
TrueHuman = "np.ndarray | DenseCausalTable | LcaParams"


@dataclass
class MomentSource:
    """Where feature moments come from each round.

    ``exact`` computes expectations against a table-form human (per-turn
    Markov array or dense table) in closed form; ``sampled`` draws fresh
    interactions from any human form, including the accumulator simulator.
    """

    kind: str
    human: object
    samples_per_iteration: int = 0
    stimulus_map: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "sampled"):
            raise ValueError(f"unknown moment source kind {self.kind!r}")
        if self.kind == "sampled" and self.samples_per_iteration < 1:
            raise ValueError("sampled moments need samples_per_iteration >= 1")
        if self.kind == "exact" and isinstance(self.human, LcaParams):
            raise ValueError("exact moments need a table-form human model")


def _sample_from_tables(human, policy: StructuredMachinePolicy, count: int,
                        rng: np.random.Generator) -> SampleBatch:
    """Simulate interactions when the true human is a conditional table."""
    from .lca import PolicyWalker
    from .process import pack_history

    spec = policy.spec
    trajectories = []
    for _ in range(count):
        walker = PolicyWalker(policy)
        hs: list[int] = []
        ms: list[int] = []
        for t in range(1, spec.horizon + 1):
            m, _ = walker.sample(rng)
            if isinstance(human, np.ndarray):
                probs = human[t - 1, :, m]
            else:
                hist = pack_history(spec, "human", tuple(hs), tuple(ms) + (m,))
                probs = human.tables[t - 1][hist]
            h = int(rng.choice(spec.n_human, p=probs / probs.sum()))
            walker.advance(m, h)
            hs.append(h)
            ms.append(m)
        trajectories.append(Trajectory(tuple(hs), tuple(ms)))
    return SampleBatch(spec, trajectories)


def acquire_moments(source: MomentSource, policy: StructuredMachinePolicy,
                    features: list[Feature], rng: np.random.Generator
                    ) -> tuple[np.ndarray, SampleBatch | None]:
    """Feature moments under the current policy, exact or sampled."""
    spec = policy.spec
    if source.kind == "sampled":
        if isinstance(source.human, LcaParams):
            seed = int(rng.integers(0, 2**63 - 1))
            batch = sample_interactions(policy, source.human,
                                        source.samples_per_iteration, seed,
                                        stimulus_map=source.stimulus_map)
        else:
            batch = _sample_from_tables(source.human, policy,
                                        source.samples_per_iteration, rng)
        return empirical_moments(batch, features), batch

    if isinstance(source.human, np.ndarray):
        groups = [feature_prefixes(f, spec) for f in features]
        tree = union_tree(spec, policy.tree, *groups)
        pview = PolicyFlowView(policy, tree)
        hview = HumanFlowView(np.asarray(source.human, dtype=float), tree)
        flows = forward_flows(hview, pview, tree, spec)
        vals = [expected_value(resolve_feature(f, tree, spec), flows, pview, tree)
                for f in features]
        return np.array(vals), None

    if isinstance(source.human, DenseCausalTable):
        joint = factorize_joint(source.human, policy.to_dense())
        moments = np.zeros(len(features))
        for traj, mass in joint.items():
            if mass > 0.0:
                for j, f in enumerate(features):
                    moments[j] += mass * f.evaluate(traj)
        return moments, None

    raise TypeError(f"unsupported human form {type(source.human).__name__}")


# ---------------------------------------------------------------------------
# The per-round constraint and the monitor.
# ---------------------------------------------------------------------------


def step_constraint(policy: StructuredMachinePolicy,
                    soft_values: StructuredSoftValues,
                    reward: RewardFunction, gamma: float,
                    feature_id: str = "step-constraint"
                    ) -> tuple[CompositeFeature, float]:
    """Feature evaluating -log of the policy's action sequence plus scaled
    reward, with its threshold set to the soft-value log-partition.

    The per-turn part covers the product form of the policy; each corrected
    node contributes the difference between its conditional and the product
    at the machine action taken from it, so the feature reproduces the exact
    value on every trajectory, including ones that ride the tree partway.
    """
    spec = policy.spec
    if not np.isfinite(policy.step_log_prob).all():
        raise ValueError("policy has zero-probability actions off-tree; "
                         "the constraint value would be infinite")
    tables = (-policy.step_log_prob[:, None, :] + gamma * reward.per_step)
    machine_terms: dict = {}
    for nid, logp in policy.node_log_prob.items():
        if not np.isfinite(logp).all():
            raise ValueError("policy has zero-probability actions on-tree; "
                             "the constraint value would be infinite")
        key = policy.tree.key_for(nid)
        level = policy.tree.nodes[nid].level
        delta = -logp + policy.step_log_prob[level]
        for m in range(spec.n_machine):
            if delta[m] != 0.0:
                machine_terms[(key, m)] = float(delta[m])
    node_terms = {}
    for p in reward.path_parts:
        key = prefix_key(p.path.human, p.path.machine)
        node_terms[key] = node_terms.get(key, 0.0) + gamma * p.coefficient
    feature = CompositeFeature(feature_id, tables, node_terms, machine_terms)
    return feature, log_partition(soft_values)


def pair_metrics(human: StructuredHumanModel, policy: StructuredMachinePolicy,
                 reward: RewardFunction, gamma: float
                 ) -> tuple[float, float, float]:
    """(monitor value, machine causal entropy, expected reward) of a pair."""
    spec = human.spec
    path_keys = [(p.path.human, p.path.machine) for p in reward.path_parts]
    tree = union_tree(spec, human.tree, policy.tree, path_keys)
    hview = HumanFlowView(human, tree)
    pview = PolicyFlowView(policy, tree)
    flows = forward_flows(hview, pview, tree, spec)
    ent = machine_causal_entropy(flows, pview, tree, spec)
    resolved = resolve_feature(reward.as_feature("__reward"), tree, spec)
    mean_reward = expected_value(resolved, flows, pview, tree)
    return ent + gamma * mean_reward, ent, mean_reward


def regularized_reward(human: StructuredHumanModel,
                       policy: StructuredMachinePolicy,
                       reward: RewardFunction, gamma: float) -> float:
    """Monitor value: machine causal entropy plus gamma times mean reward."""
    value, _, _ = pair_metrics(human, policy, reward, gamma)
    return value


# ---------------------------------------------------------------------------
# Loop state and driver.
# ---------------------------------------------------------------------------


@dataclass
class AreaOptions:
    gamma: float
    iterations: int
    estimation: EstimationOptions = field(default_factory=EstimationOptions)
    policy_tol: float = 1e-8
    objective_tol: float = 1e-6
    stop_on_convergence: bool = False
    keep_policies: bool = False
    use_step_constraint: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")


@dataclass
class TraceRow:
    iteration: int
    objective: float
    entropy_machine: float
    expected_reward: float
    moment_residual_max: float
    policy_delta: float
    wall_ms: float
    estimation_converged: bool


@dataclass
class AreaState:
    n: int
    policy: StructuredMachinePolicy
    human: StructuredHumanModel | None = None
    soft_values: StructuredSoftValues | None = None
    objective: float = float("nan")
    warm_duals: DualVariables | None = None
    rows: list[TraceRow] = field(default_factory=list)
    batches: list[SampleBatch | None] = field(default_factory=list)
    policies: list[StructuredMachinePolicy] = field(default_factory=list)
    converged: bool = False
    converged_at: int | None = None
    failures: int = 0
    _flat_count: int = 0

    @classmethod
    def initial(cls, spec: ProcessSpec) -> "AreaState":
        return cls(0, StructuredMachinePolicy.uniform(spec))


def area_step(state: AreaState, equality_features: list[Feature],
              inequality: list[tuple[Feature, float]],
              reward: RewardFunction, source: MomentSource,
              options: AreaOptions, rng: np.random.Generator) -> AreaState:
    """One full round: moments, estimation, monitor, machine optimization."""
    t0 = time.perf_counter()
    moments, batch = acquire_moments(source, state.policy, equality_features, rng)
    constraints = ConstraintSet(
        list(zip(equality_features, moments)), list(inequality),
        includes_reward=True)
    warm = state.warm_duals
    if state.n >= 1 and options.use_step_constraint:
        feat, threshold = step_constraint(state.policy, state.soft_values,
                                          reward, options.gamma,
                                          feature_id="__round-constraint")
        constraints = constraints.with_inequality(feat, threshold)
        if warm is not None and len(warm.inequality) == len(inequality):
            warm = DualVariables(warm.equality,
                                 np.append(warm.inequality, 0.0))
    result = estimate_human(state.policy, constraints, options.estimation,
                            initial=warm)
    if not result.converged:
        state.failures += 1
    objective, ent, mean_reward = pair_metrics(result.model, state.policy,
                                               reward, options.gamma)

    values = backward_structured(result.model, reward, options.gamma)
    next_policy = extract_policy(values)
    delta = next_policy.max_abs_diff(state.policy)

    new = AreaState(state.n + 1, next_policy, result.model, values, objective,
                    result.duals, state.rows, state.batches, state.policies,
                    state.converged, state.converged_at, state.failures,
                    state._flat_count)
    if not np.isnan(state.objective) and abs(objective - state.objective) <= options.objective_tol:
        new._flat_count += 1
    else:
        new._flat_count = 0
    if not new.converged and (delta <= options.policy_tol or new._flat_count >= 2):
        new.converged = True
        new.converged_at = state.n
    wall_ms = (time.perf_counter() - t0) * 1e3
    new.rows.append(TraceRow(state.n, objective, ent, mean_reward,
                             result.max_residual, delta, wall_ms,
                             result.converged))
    new.batches.append(batch)
    if options.keep_policies:
        new.policies.append(state.policy)
    return new


@dataclass
class AreaTrace:
    rows: list[TraceRow]
    final_policy: StructuredMachinePolicy
    final_human: StructuredHumanModel | None
    converged: bool
    converged_at: int | None
    failures: int
    batches: list[SampleBatch | None]
    policies: list[StructuredMachinePolicy]

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.rows])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "L", "entropy_machine", "expected_reward",
                             "moment_residual_max", "policy_delta", "wall_ms"])
            for r in self.rows:
                writer.writerow([r.iteration, f"{r.objective:.12g}",
                                 f"{r.entropy_machine:.12g}",
                                 f"{r.expected_reward:.12g}",
                                 f"{r.moment_residual_max:.6e}",
                                 f"{r.policy_delta:.6e}",
                                 f"{r.wall_ms:.3f}"])


def run_area(spec: ProcessSpec, reward: RewardFunction,
             equality_features: list[Feature],
             inequality: list[tuple[Feature, float]],
             source: MomentSource, options: AreaOptions, seed) -> AreaTrace:
    """Run the alternation from a uniform policy for a fixed round budget."""
    reward.check(spec)
    rng = np.random.default_rng(seed)
    state = AreaState.initial(spec)
    for _ in range(options.iterations):
        state = area_step(state, equality_features, inequality, reward,
                          source, options, rng)
        if state.converged and options.stop_on_convergence:
            break
    return AreaTrace(state.rows, state.policy, state.human, state.converged,
                     state.converged_at, state.failures, state.batches,
                     state.policies)
