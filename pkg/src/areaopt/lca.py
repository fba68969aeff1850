"""Leaky competing accumulator human simulator and empirical moments.

One accumulator per human option tracks the tendency to pick it.  Each turn
the machine's action acts as an external stimulus boosting the matching
accumulator; decay, mutual inhibition, and Gaussian noise shape the rest.
The human picks the option whose accumulator is highest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .process import ProcessSpec, Trajectory
from .structured import StructuredMachinePolicy


@dataclass(frozen=True)
class LcaParams:
    decay: float = 0.1
    inhibition: float = 0.2
    stimulus_strength: float = 0.4
    noise_power: float = 0.09
    initial_value: float = 0.0

    def __post_init__(self):
        for name in ("decay", "inhibition", "stimulus_strength", "noise_power"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def noise_scale(self) -> float:
        return float(np.sqrt(self.noise_power))


def lca_step(acc: np.ndarray, stimulus: int, params: LcaParams,
             rng: np.random.Generator) -> np.ndarray:
    """One accumulator update driven by the stimulated option index."""
    acc = np.asarray(acc, dtype=float)
    others = acc.sum() - acc
    drive = acc - params.decay * acc - params.inhibition * others
    drive[stimulus] += params.stimulus_strength
    if params.noise_scale > 0.0:
        drive = drive + params.noise_scale * rng.standard_normal(acc.size)
    return np.maximum(0.0, drive)


def lca_choose(acc: np.ndarray, rng: np.random.Generator) -> int:
    """Index of the highest accumulator; exact ties break uniformly."""
    acc = np.asarray(acc)
    best = np.flatnonzero(acc == acc.max())
    if best.size == 1:
        return int(best[0])
    return int(rng.choice(best))


@dataclass
class SampleBatch:
    spec: ProcessSpec
    trajectories: list[Trajectory]
    policy_id: str = ""
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.trajectories)

    def save_csv(self, path) -> None:
        T = self.spec.horizon
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"h_{t}" for t in range(1, T + 1)]
                            + [f"m_{t}" for t in range(1, T + 1)])
            for traj in self.trajectories:
                writer.writerow(list(traj.human) + list(traj.machine))

    @classmethod
    def load_csv(cls, path, spec: ProcessSpec) -> "SampleBatch":
        trajectories = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                vals = [int(v) for v in row]
                T = spec.horizon
                trajectories.append(Trajectory(tuple(vals[:T]), tuple(vals[T:])))
        return cls(spec, trajectories)


class PolicyWalker:
    """Stateful per-trajectory sampler for a structured machine policy."""

    def __init__(self, policy: StructuredMachinePolicy):
        self.policy = policy
        self.node: int | None = 0
        self.t = 1

    def sample(self, rng: np.random.Generator) -> tuple[int, float]:
        """Draw the next machine action; returns (action, log-probability)."""
        if self.node is not None:
            probs = self.policy.node_probs(self.node)
        else:
            probs = self.policy.step_probs(self.t)
        m = int(rng.choice(len(probs), p=probs / probs.sum()))
        return m, float(np.log(probs[m]))

    def advance(self, m: int, h: int) -> None:
        self.node = self.policy.tree.step(self.node, m, h)
        self.t += 1


def sample_interactions(policy: StructuredMachinePolicy, params: LcaParams,
                        count: int, seed, spec: ProcessSpec | None = None,
                        stimulus_map: np.ndarray | None = None,
                        policy_id: str = "") -> SampleBatch:
    """Simulate ``count`` interactions of the accumulator human with a policy.

    Each turn the machine samples an action, the accumulators update with
    that action as the stimulus, and the human picks the argmax.  The
    accumulators reset between trajectories.  With unequal alphabets a
    ``stimulus_map`` from machine actions to stimulated options is required.

    Policies without tree corrections take a batch-vectorized path; both
    paths are deterministic in the seed but consume the generator in a
    different order.
    """
    spec = spec or policy.spec
    if spec.n_machine != spec.n_human and stimulus_map is None:
        raise ValueError("unequal alphabets need an explicit stimulus map")
    if stimulus_map is None:
        stimulus_map = np.arange(spec.n_machine)
    stimulus_map = np.asarray(stimulus_map, dtype=int)
    rng = np.random.default_rng(seed)
    if len(policy.tree) == 1 and count > 1:
        trajectories = _sample_product_batch(policy, params, count, rng, spec,
                                             stimulus_map)
    else:
        trajectories = []
        for _ in range(count):
            acc = np.full(spec.n_human, params.initial_value)
            walker = PolicyWalker(policy)
            hs: list[int] = []
            ms: list[int] = []
            for _t in range(spec.horizon):
                m, _ = walker.sample(rng)
                acc = lca_step(acc, int(stimulus_map[m]), params, rng)
                h = lca_choose(acc, rng)
                walker.advance(m, h)
                hs.append(h)
                ms.append(m)
            trajectories.append(Trajectory(tuple(hs), tuple(ms)))
    return SampleBatch(spec, trajectories, policy_id, seed)


def _sample_product_batch(policy: StructuredMachinePolicy, params: LcaParams,
                          count: int, rng: np.random.Generator,
                          spec: ProcessSpec,
                          stimulus_map: np.ndarray) -> list[Trajectory]:
    """All trajectories at once; valid when the policy is a per-turn product."""
    H = spec.n_human
    acc = np.full((count, H), params.initial_value)
    hs = np.empty((count, spec.horizon), dtype=int)
    ms = np.empty((count, spec.horizon), dtype=int)
    rows = np.arange(count)
    for t in range(1, spec.horizon + 1):
        probs = policy.step_probs(t)
        m = rng.choice(spec.n_machine, size=count, p=probs / probs.sum())
        others = acc.sum(axis=1, keepdims=True) - acc
        drive = acc - params.decay * acc - params.inhibition * others
        drive[rows, stimulus_map[m]] += params.stimulus_strength
        if params.noise_scale > 0.0:
            drive += params.noise_scale * rng.standard_normal((count, H))
        acc = np.maximum(0.0, drive)
        ties = acc == acc.max(axis=1, keepdims=True)
        keys = np.where(ties, rng.random((count, H)), -1.0)
        h = np.argmax(keys, axis=1)
        hs[:, t - 1] = h
        ms[:, t - 1] = m
    return [Trajectory(tuple(int(x) for x in hs[i]),
                       tuple(int(x) for x in ms[i])) for i in range(count)]


def empirical_moments(batch: SampleBatch, features) -> np.ndarray:
    """Sample means of each feature over the batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    out = np.zeros(len(features))
    for traj in batch.trajectories:
        for j, f in enumerate(features):
            out[j] += f.evaluate(traj)
    return out / len(batch)


def fit_markov_human(batch: SampleBatch, smoothing: float = 1.0) -> np.ndarray:
    """Per-turn conditional frequencies P(h_t | m_t) with additive smoothing.

    A coarse table-form surrogate of whatever generated the batch, usable
    wherever exact moment computation needs a recursion-friendly human model.
    """
    spec = batch.spec
    counts = np.full((spec.horizon, spec.n_human, spec.n_machine), smoothing)
    for traj in batch.trajectories:
        for t in range(spec.horizon):
            counts[t, traj.human[t], traj.machine[t]] += 1.0
    return counts / counts.sum(axis=1, keepdims=True)


def fit_gibbs_human(batch: SampleBatch, features) -> np.ndarray:
    """Markov tables of the max-entropy model matching the batch's moments.

    Fit once against the uniform policy.  With purely per-turn features the
    resulting conditionals are the same member of the exponential family
    under every product-form policy, so moments computed against it satisfy
    the realizability hypothesis behind the alternation's monotonicity
    guarantee.  Used as the noise-free surrogate of a sampled human.
    """
    from .estimation import EstimationOptions, solve_dual
    from .features import ConstraintSet

    for f in features:
        if f.prefix_terms(batch.spec) or f.machine_step_terms(batch.spec):
            raise ValueError("surrogate fitting needs per-turn features only")
    policy = StructuredMachinePolicy.uniform(batch.spec)
    moments = empirical_moments(batch, features)
    constraints = ConstraintSet(list(zip(features, moments)), [])
    options = EstimationOptions(grad_tol=1e-10, moment_tol=1e-10, max_iters=3000)
    sol = solve_dual(policy, constraints, options)
    if not sol.converged:
        raise RuntimeError("surrogate fit did not converge; moments may be "
                           "inconsistent")
    return np.exp(sol.model.step_log_prob)
