"""Shared generators for randomized instances."""

import numpy as np
import pytest

from areaopt import (ConstraintSet, DecomposableFeature, DenseCausalTable,
                     PathFeature, PrefixFeature, ProcessSpec, Trajectory)
from areaopt.estimation import DualVariables
from areaopt.pathtree import PathTree
from areaopt.structured import StructuredMachinePolicy


def random_trajectory(spec, rng):
    return Trajectory(tuple(int(x) for x in rng.integers(0, spec.n_human, spec.horizon)),
                      tuple(int(x) for x in rng.integers(0, spec.n_machine, spec.horizon)))


def random_structured_policy(spec, rng, paths=(), corrected=True):
    """Per-turn product policy, optionally with corrections on path prefixes."""
    keys = []
    for p in paths:
        keys.extend((p.human[:k], p.machine[:k]) for k in range(1, len(p.human) + 1))
    tree = PathTree(spec, keys)
    step_log = np.log(rng.dirichlet(np.full(spec.n_machine, 2.0), size=spec.horizon))
    node_log = {}
    if corrected:
        for nid in range(len(tree)):
            if tree.nodes[nid].level < spec.horizon:
                node_log[nid] = np.log(rng.dirichlet(np.full(spec.n_machine, 2.0)))
    return StructuredMachinePolicy(spec, step_log, tree, node_log)


def random_mixed_instance(rng, max_T=4, max_alpha=3, n_paths=1,
                          with_prefix=True, with_inequality=True):
    """Random spec, mixed feature set, duals, and a tree-corrected policy."""
    T = int(rng.integers(1, max_T + 1))
    H = int(rng.integers(2, max_alpha + 1))
    M = int(rng.integers(2, max_alpha + 1))
    spec = ProcessSpec(T, H, M)
    paths = [random_trajectory(spec, rng) for _ in range(n_paths)]
    policy = random_structured_policy(spec, rng, paths)
    features = [DecomposableFeature("dec0", rng.normal(size=(T, H, M)))]
    for i, p in enumerate(paths):
        features.append(PathFeature(f"path{i}", p, float(rng.uniform(0.5, 2.0))))
    if with_prefix and T >= 2:
        p = paths[0]
        k = int(rng.integers(1, T))
        features.append(PrefixFeature("prefix0", p.human[:k], p.machine[:k],
                                      float(rng.uniform(0.5, 2.0))))
    equality = [(f, 0.0) for f in features[:2]]
    inequality = [(f, 0.0) for f in features[2:]] if with_inequality else []
    if not with_inequality:
        equality = [(f, 0.0) for f in features]
    constraints = ConstraintSet(equality, inequality)
    duals = DualVariables(rng.normal(size=len(constraints.equality)) * 0.7,
                          np.abs(rng.normal(size=len(constraints.inequality))) * 0.7)
    return spec, policy, constraints, duals


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
