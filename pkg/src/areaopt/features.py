"""Trajectory features, rewards, and moment-constraint sets.

Three public feature forms:

* decomposable  -- a per-turn table summed along the trajectory,
* path-based    -- a scaled indicator of one exact full trajectory,
* prefix-based  -- a scaled indicator that the first s turns match a prefix,
* dense         -- an arbitrary trajectory table, usable only at small horizon.

Every form except dense exposes the structural pieces the fast estimation
and optimization recursions consume: a per-turn table, terms anchored at
prefix-tree nodes, and terms attached to a machine action taken from a node.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .process import ProcessSpec, Trajectory, pack_trajectory

#: key identifying a prefix of an interaction: (human actions, machine actions)
PrefixKey = tuple[tuple[int, ...], tuple[int, ...]]


def prefix_key(human: tuple[int, ...], machine: tuple[int, ...]) -> PrefixKey:
    if len(human) != len(machine):
        raise ValueError("prefix needs equal-length human and machine parts")
    return (tuple(human), tuple(machine))


class StructuredFormError(TypeError):
    """Raised when a feature has no structured (table + tree terms) form."""


@dataclass(frozen=True)
class DecomposableFeature:
    """Sum over turns of a per-turn table ``per_step[t-1, h, m]``."""

    id: str
    per_step: np.ndarray

    def check(self, spec: ProcessSpec) -> None:
        want = (spec.horizon, spec.n_human, spec.n_machine)
        if self.per_step.shape != want:
            raise ValueError(f"{self.id}: table shape {self.per_step.shape}, want {want}")
        if not np.isfinite(self.per_step).all():
            raise ValueError(f"{self.id}: non-finite table entry")

    def evaluate(self, traj: Trajectory) -> float:
        hs = np.asarray(traj.human)
        ms = np.asarray(traj.machine)
        return float(self.per_step[np.arange(len(hs)), hs, ms].sum())

    def step_tables(self, spec: ProcessSpec) -> np.ndarray | None:
        return self.per_step

    def prefix_terms(self, spec: ProcessSpec) -> dict[PrefixKey, float]:
        return {}

    def machine_step_terms(self, spec: ProcessSpec) -> dict[tuple[PrefixKey, int], float]:
        return {}


@dataclass(frozen=True)
class PathFeature:
    """``coefficient`` if the whole trajectory equals ``path``, else 0."""

    id: str
    path: Trajectory
    coefficient: float = 1.0

    def check(self, spec: ProcessSpec) -> None:
        self.path.validate(spec)
        if not np.isfinite(self.coefficient):
            raise ValueError(f"{self.id}: non-finite coefficient")

    def evaluate(self, traj: Trajectory) -> float:
        return self.coefficient if traj == self.path else 0.0

    def step_tables(self, spec: ProcessSpec) -> np.ndarray | None:
        return None

    def prefix_terms(self, spec: ProcessSpec) -> dict[PrefixKey, float]:
        return {prefix_key(self.path.human, self.path.machine): self.coefficient}

    def machine_step_terms(self, spec: ProcessSpec) -> dict[tuple[PrefixKey, int], float]:
        return {}


@dataclass(frozen=True)
class PrefixFeature:
    """``coefficient`` if the first ``len`` turns match the stored prefix."""

    id: str
    human_prefix: tuple[int, ...]
    machine_prefix: tuple[int, ...]
    coefficient: float = 1.0

    def check(self, spec: ProcessSpec) -> None:
        n = len(self.human_prefix)
        if n != len(self.machine_prefix):
            raise ValueError(f"{self.id}: prefix parts differ in length")
        if n < 1 or n > spec.horizon:
            raise ValueError(f"{self.id}: prefix length {n} out of range")
        if any(h < 0 or h >= spec.n_human for h in self.human_prefix):
            raise ValueError(f"{self.id}: human action out of range")
        if any(m < 0 or m >= spec.n_machine for m in self.machine_prefix):
            raise ValueError(f"{self.id}: machine action out of range")

    def evaluate(self, traj: Trajectory) -> float:
        n = len(self.human_prefix)
        if traj.human[:n] == self.human_prefix and traj.machine[:n] == self.machine_prefix:
            return self.coefficient
        return 0.0

    def step_tables(self, spec: ProcessSpec) -> np.ndarray | None:
        return None

    def prefix_terms(self, spec: ProcessSpec) -> dict[PrefixKey, float]:
        return {prefix_key(self.human_prefix, self.machine_prefix): self.coefficient}

    def machine_step_terms(self, spec: ProcessSpec) -> dict[tuple[PrefixKey, int], float]:
        return {}


@dataclass(frozen=True)
class DenseFeature:
    """Arbitrary trajectory function tabulated over all trajectories."""

    id: str
    spec: ProcessSpec
    values: np.ndarray  # indexed by packed trajectory code

    @classmethod
    def from_function(cls, id: str, spec: ProcessSpec, fn,
                      cap: int | None = None) -> "DenseFeature":
        from .process import unpack_trajectory
        spec.check_cap(cap)
        vals = np.array([fn(unpack_trajectory(spec, c))
                         for c in range(spec.n_trajectories)])
        return cls(id, spec, vals)

    def check(self, spec: ProcessSpec) -> None:
        if spec != self.spec:
            raise ValueError(f"{self.id}: built on a different process spec")
        if self.values.shape != (spec.n_trajectories,):
            raise ValueError(f"{self.id}: wrong value-table size")

    def evaluate(self, traj: Trajectory) -> float:
        return float(self.values[pack_trajectory(self.spec, traj)])

    def step_tables(self, spec: ProcessSpec):
        raise StructuredFormError(f"{self.id}: dense features have no structured form")

    def prefix_terms(self, spec: ProcessSpec):
        raise StructuredFormError(f"{self.id}: dense features have no structured form")

    def machine_step_terms(self, spec: ProcessSpec):
        raise StructuredFormError(f"{self.id}: dense features have no structured form")


Feature = DecomposableFeature | PathFeature | PrefixFeature | DenseFeature


def eval_feature(feature, traj: Trajectory) -> float:
    return feature.evaluate(traj)


@dataclass(frozen=True)
class RewardFunction:
    """Decomposable per-turn reward plus optional exact-path bonuses."""

    per_step: np.ndarray
    path_parts: tuple[PathFeature, ...] = ()

    def check(self, spec: ProcessSpec) -> None:
        want = (spec.horizon, spec.n_human, spec.n_machine)
        if self.per_step.shape != want:
            raise ValueError(f"reward table shape {self.per_step.shape}, want {want}")
        for p in self.path_parts:
            p.check(spec)

    def evaluate(self, traj: Trajectory) -> float:
        hs = np.asarray(traj.human)
        ms = np.asarray(traj.machine)
        total = float(self.per_step[np.arange(len(hs)), hs, ms].sum())
        for p in self.path_parts:
            total += p.evaluate(traj)
        return total

    def as_feature(self, id: str = "reward") -> Feature:
        """The reward viewed as a single moment-matching feature."""
        if not self.path_parts:
            return DecomposableFeature(id, self.per_step)
        return CompositeFeature(
            id, self.per_step,
            {prefix_key(p.path.human, p.path.machine): p.coefficient
             for p in self.path_parts},
        )

    @classmethod
    def decomposable(cls, per_step: np.ndarray) -> "RewardFunction":
        return cls(np.asarray(per_step, dtype=float))

    @classmethod
    def path_only(cls, spec: ProcessSpec, paths: list[PathFeature]) -> "RewardFunction":
        zero = np.zeros((spec.horizon, spec.n_human, spec.n_machine))
        return cls(zero, tuple(paths))


def reward_eval(reward: RewardFunction, traj: Trajectory) -> float:
    return reward.evaluate(traj)


@dataclass(frozen=True)
class CompositeFeature:
    """Decomposable table plus terms anchored on interaction prefixes.

    ``node_terms`` adds its value once the interaction has matched the keyed
    prefix through its full length; ``machine_terms`` adds its value when the
    machine plays the keyed action right after matching the keyed prefix.
    Together these express every function the fast recursions support,
    including rewards with path bonuses and the per-round policy constraint
    used by the alternating loop.
    """

    id: str
    per_step: np.ndarray
    node_terms: dict[PrefixKey, float] = field(default_factory=dict)
    machine_terms: dict[tuple[PrefixKey, int], float] = field(default_factory=dict)

    def check(self, spec: ProcessSpec) -> None:
        want = (spec.horizon, spec.n_human, spec.n_machine)
        if self.per_step.shape != want:
            raise ValueError(f"{self.id}: table shape {self.per_step.shape}, want {want}")

    def evaluate(self, traj: Trajectory) -> float:
        hs = np.asarray(traj.human)
        ms = np.asarray(traj.machine)
        total = float(self.per_step[np.arange(len(hs)), hs, ms].sum())
        for (hp, mp), val in self.node_terms.items():
            n = len(hp)
            if traj.human[:n] == hp and traj.machine[:n] == mp:
                total += val
        for ((hp, mp), m), val in self.machine_terms.items():
            n = len(hp)
            if (traj.human[:n] == hp and traj.machine[:n] == mp
                    and n < len(traj.machine) and traj.machine[n] == m):
                total += val
        return total

    def step_tables(self, spec: ProcessSpec) -> np.ndarray | None:
        return self.per_step

    def prefix_terms(self, spec: ProcessSpec) -> dict[PrefixKey, float]:
        return self.node_terms

    def machine_step_terms(self, spec: ProcessSpec) -> dict[tuple[PrefixKey, int], float]:
        return self.machine_terms


@dataclass
class ConstraintSet:
    """Equality features with target moments, inequality features with floors.

    Inequality constraints are normalized to ``E[g] >= threshold``.
    """

    equality: list[tuple[Feature, float]]
    inequality: list[tuple[Feature, float]]
    includes_reward: bool = True

    def __post_init__(self):
        ids = [f.id for f, _ in self.equality] + [f.id for f, _ in self.inequality]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ValueError(f"duplicate feature ids: {sorted(dupes)}")
        for _, c in self.equality + self.inequality:
            if not np.isfinite(c):
                raise ValueError("non-finite constraint moment")

    @property
    def features(self) -> list[Feature]:
        return [f for f, _ in self.equality] + [f for f, _ in self.inequality]

    @property
    def targets(self) -> np.ndarray:
        return np.array([c for _, c in self.equality] + [c for _, c in self.inequality])

    @property
    def n_equality(self) -> int:
        return len(self.equality)

    def check(self, spec: ProcessSpec) -> None:
        for f in self.features:
            f.check(spec)

    def with_inequality(self, feature: Feature, threshold: float) -> "ConstraintSet":
        return ConstraintSet(list(self.equality),
                             list(self.inequality) + [(feature, threshold)],
                             self.includes_reward)


def build_constraint_set(equality: list[tuple[Feature, float]],
                         inequality: list[tuple[Feature, float]] | None = None,
                         reward_id: str | None = None) -> ConstraintSet:
    """Assemble a constraint set, warning when the reward is not matched.

    Estimates that do not pin the mean reward generally drift away from the
    behavior the optimization step assumes, so leaving the reward feature out
    of the equality set is allowed but flagged.
    """
    inequality = inequality or []
    eq_ids = [f.id for f, _ in equality]
    includes = reward_id is not None and reward_id in eq_ids
    if not includes:
        warnings.warn("reward feature is not in the equality set; "
                      "estimated models will not match observed mean reward",
                      stacklevel=2)
    return ConstraintSet(list(equality), list(inequality), includes)


# ---------------------------------------------------------------------------
# Named builders used by experiment configurations.
# ---------------------------------------------------------------------------


def follow_table(spec: ProcessSpec) -> np.ndarray:
    """Per-turn indicator that the human repeated the machine's action."""
    tab = np.zeros((spec.horizon, spec.n_human, spec.n_machine))
    for a in range(min(spec.n_human, spec.n_machine)):
        tab[:, a, a] = 1.0
    return tab


def weighted_follow_table(spec: ProcessSpec, period: int = 5,
                          on_weight: float = 1.0, off_weight: float = 0.25) -> np.ndarray:
    """Follow indicator, weighted ``on_weight`` at turns divisible by ``period``."""
    tab = follow_table(spec)
    for t in range(1, spec.horizon + 1):
        tab[t - 1] *= on_weight if t % period == 0 else off_weight
    return tab


def periodic_target_table(spec: ProcessSpec, period: int = 5, target: int = 0) -> np.ndarray:
    """Reward 1 for the target human action at turns divisible by ``period``,
    and 1 for any other human action at the remaining turns."""
    tab = np.zeros((spec.horizon, spec.n_human, spec.n_machine))
    for t in range(1, spec.horizon + 1):
        if t % period == 0:
            tab[t - 1, target, :] = 1.0
        else:
            tab[t - 1, :, :] = 1.0
            tab[t - 1, target, :] = 0.0
    return tab


def constant_table(spec: ProcessSpec, value: float) -> np.ndarray:
    return np.full((spec.horizon, spec.n_human, spec.n_machine), float(value))


TABLE_BUILDERS = {
    "follow": follow_table,
    "weighted-follow": weighted_follow_table,
    "periodic-target": periodic_target_table,
    "constant": constant_table,
}


def path_with_prefixes(id: str, path: Trajectory, coefficient: float = 1.0
                       ) -> list[Feature]:
    """The full-path indicator plus one prefix indicator per shorter length.

    Matching all of these moments pins the estimated model's conditional
    probabilities along the path turn by turn, which is what makes a
    path-anchored reward optimal after a single alternation round.
    """
    T = len(path.human)
    feats: list[Feature] = []
    for t in range(1, T):
        feats.append(PrefixFeature(f"{id}.prefix{t}", path.human[:t],
                                   path.machine[:t], coefficient))
    feats.append(PathFeature(f"{id}.full", path, coefficient))
    return feats
