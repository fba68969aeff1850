"""Compact interaction models: per-turn tables plus prefix-tree corrections.

Both sides admit the same compression.  Off the prefix tree of tracked
supports, a structured human model conditions only on the current machine
action and a structured machine policy only on the turn index; on the tree,
each node stores its own corrected conditional.  That is exactly the family
the alternating loop produces, and it keeps storage linear in the horizon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import PrefixKey
from .pathtree import PathTree
from .process import (HUMAN, MACHINE, DenseCausalTable, ProcessSpec, Trajectory,
                      n_human_histories, n_machine_histories, unpack_history)


def masked_dot(weights: np.ndarray, values: np.ndarray) -> float:
    """Weighted sum that treats zero-weight terms as zero even for -inf values."""
    prod = np.where(weights > 0.0, weights * values, 0.0)
    return float(np.sum(prod))


def log_sum_exp(a: np.ndarray, axis: int | None = None):
    """Lean log-sum-exp for the small arrays in the backward sweeps."""
    a = np.asarray(a, dtype=float)
    if axis is None:
        m = a.max()
        if not np.isfinite(m):
            return float(m)
        return float(np.log(np.exp(a - m).sum()) + m)
    m = a.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - safe).sum(axis=axis)) + np.squeeze(safe, axis=axis)
    return out


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return float(-terms.sum())


def _softmax_rows(log_w: np.ndarray, axis: int = -1) -> np.ndarray:
    shift = log_w - np.max(log_w, axis=axis, keepdims=True)
    w = np.exp(shift)
    return w / w.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Structured machine policy.
# ---------------------------------------------------------------------------


@dataclass
class StructuredMachinePolicy:
    """Machine policy: per-turn action distributions off the prefix tree,
    per-node corrected distributions on it."""

    spec: ProcessSpec
    step_log_prob: np.ndarray                       # (T, |M|), rows normalized
    tree: PathTree
    node_log_prob: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def uniform(cls, spec: ProcessSpec) -> "StructuredMachinePolicy":
        logp = np.full((spec.horizon, spec.n_machine), -np.log(spec.n_machine))
        return cls(spec, logp, PathTree(spec), {})

    def step_probs(self, t: int) -> np.ndarray:
        return np.exp(self.step_log_prob[t - 1])

    def node_probs(self, nid: int) -> np.ndarray:
        logp = self.node_log_prob.get(nid)
        if logp is None:
            t = self.tree.nodes[nid].level + 1
            return self.step_probs(t)
        return np.exp(logp)

    def log_causal_prob(self, traj: Trajectory) -> float:
        """Log-probability of the machine's action sequence along ``traj``."""
        node: int | None = 0
        total = 0.0
        for t in range(1, self.spec.horizon + 1):
            m, h = traj.machine[t - 1], traj.human[t - 1]
            if node is not None:
                logp = self.node_log_prob.get(node)
                total += (logp[m] if logp is not None
                          else self.step_log_prob[t - 1, m])
                node = self.tree.step(node, m, h)
            else:
                total += self.step_log_prob[t - 1, m]
        return float(total)

    def to_dense(self) -> DenseCausalTable:
        spec = self.spec
        tables = []
        for t in range(1, spec.horizon + 1):
            n = n_machine_histories(spec, t)
            tab = np.empty((n, spec.n_machine))
            for code in range(n):
                hs, ms = unpack_history(spec, MACHINE, t, code)
                node: int | None = 0
                for m, h in zip(ms, hs):
                    node = self.tree.step(node, m, h)
                    if node is None:
                        break
                if node is None:
                    tab[code] = self.step_probs(t)
                else:
                    tab[code] = self.node_probs(node)
            tables.append(tab)
        return DenseCausalTable(spec, MACHINE, tables)

    def storage_entries(self) -> int:
        n = self.step_log_prob.size
        n += sum(v.size for v in self.node_log_prob.values())
        return n

    def max_abs_diff(self, other: "StructuredMachinePolicy") -> float:
        """Sup-norm difference of action probabilities over shared structure."""
        worst = float(np.max(np.abs(np.exp(self.step_log_prob)
                                    - np.exp(other.step_log_prob))))
        remap = self.tree.remap_to(other.tree)
        for nid in range(len(self.tree)):
            if self.tree.nodes[nid].level >= self.spec.horizon:
                continue
            oid = remap[nid]
            if oid < 0:
                continue
            t = self.tree.nodes[nid].level + 1
            diff = np.max(np.abs(self.node_probs(nid) - other.node_probs(oid)))
            worst = max(worst, float(diff))
        return worst

    def to_json(self) -> dict:
        nodes = []
        for nid, logp in sorted(self.node_log_prob.items()):
            hs, ms = self.tree.key_for(nid)
            nodes.append({"human": list(hs), "machine": list(ms),
                          "probs": [float(p) for p in np.exp(logp)]})
        return {
            "spec": {"horizon": self.spec.horizon,
                     "human_actions": self.spec.n_human,
                     "machine_actions": self.spec.n_machine},
            "side": MACHINE,
            "kind": "structured",
            "step_probs": [[float(p) for p in row]
                           for row in np.exp(self.step_log_prob)],
            "tree_nodes": nodes,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StructuredMachinePolicy":
        spec = ProcessSpec(doc["spec"]["horizon"], doc["spec"]["human_actions"],
                           doc["spec"]["machine_actions"])
        keys = [(tuple(n["human"]), tuple(n["machine"])) for n in doc["tree_nodes"]]
        tree = PathTree(spec, keys)
        node_log_prob = {}
        with np.errstate(divide="ignore"):
            for n in doc["tree_nodes"]:
                nid = tree.node_for((tuple(n["human"]), tuple(n["machine"])))
                node_log_prob[nid] = np.log(np.asarray(n["probs"], dtype=float))
            step = np.log(np.asarray(doc["step_probs"], dtype=float))
        return cls(spec, step, tree, node_log_prob)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "StructuredMachinePolicy":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# Structured human model.
# ---------------------------------------------------------------------------


@dataclass
class StructuredHumanModel:
    """Estimated human model in compact form.

    ``step_log_prob[t-1, h, m]`` is the off-tree conditional of the human
    action given the current machine action; ``step_log_norm[t-1, m]`` keeps
    the log-normalizers of the underlying backward weights.  ``node_log_prob``
    maps (node at level t-1, machine action) to the corrected conditional at
    that on-tree history.
    """

    spec: ProcessSpec
    step_log_prob: np.ndarray                       # (T, |H|, |M|)
    step_log_norm: np.ndarray                       # (T, |M|)
    tree: PathTree
    node_log_prob: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    node_log_weight: dict[int, float] = field(default_factory=dict)
    root_log_norm: np.ndarray | None = None         # (|M|,) first-turn log-normalizers

    @classmethod
    def uniform(cls, spec: ProcessSpec) -> "StructuredHumanModel":
        logp = np.full((spec.horizon, spec.n_human, spec.n_machine),
                       -np.log(spec.n_human))
        norm = np.full((spec.horizon, spec.n_machine), np.log(spec.n_human))
        return cls(spec, logp, norm, PathTree(spec), {})

    def step_probs(self, t: int) -> np.ndarray:
        return np.exp(self.step_log_prob[t - 1])

    def node_probs(self, nid: int, m: int) -> np.ndarray:
        logp = self.node_log_prob.get((nid, m))
        if logp is None:
            t = self.tree.nodes[nid].level + 1
            return np.exp(self.step_log_prob[t - 1, :, m])
        return np.exp(logp)

    def to_dense(self) -> DenseCausalTable:
        spec = self.spec
        tables = []
        for t in range(1, spec.horizon + 1):
            n = n_human_histories(spec, t)
            tab = np.empty((n, spec.n_human))
            for code in range(n):
                hs, ms = unpack_history(spec, HUMAN, t, code)
                node: int | None = 0
                for i in range(t - 1):
                    node = self.tree.step(node, ms[i], hs[i])
                    if node is None:
                        break
                if node is None:
                    tab[code] = np.exp(self.step_log_prob[t - 1, :, ms[-1]])
                else:
                    tab[code] = self.node_probs(node, ms[-1])
            tables.append(tab)
        return DenseCausalTable(spec, HUMAN, tables)

    def storage_entries(self) -> int:
        n = self.step_log_prob.size + self.step_log_norm.size
        n += sum(v.size for v in self.node_log_prob.values())
        n += len(self.node_log_weight)
        return n

    def max_abs_diff(self, other: "StructuredHumanModel") -> float:
        worst = float(np.max(np.abs(np.exp(self.step_log_prob)
                                    - np.exp(other.step_log_prob))))
        remap = self.tree.remap_to(other.tree)
        for (nid, m), logp in self.node_log_prob.items():
            oid = remap[nid]
            if oid < 0:
                continue
            diff = np.max(np.abs(np.exp(logp) - other.node_probs(oid, m)))
            worst = max(worst, float(diff))
        return worst

    def to_json(self) -> dict:
        nodes = []
        for (nid, m), logp in sorted(self.node_log_prob.items()):
            hs, ms = self.tree.key_for(nid)
            nodes.append({"human": list(hs), "machine": list(ms), "action": m,
                          "probs": [float(p) for p in np.exp(logp)]})
        return {
            "spec": {"horizon": self.spec.horizon,
                     "human_actions": self.spec.n_human,
                     "machine_actions": self.spec.n_machine},
            "side": HUMAN,
            "kind": "structured",
            "step_probs": np.exp(self.step_log_prob).tolist(),
            "step_log_norm": self.step_log_norm.tolist(),
            "tree_nodes": nodes,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StructuredHumanModel":
        spec = ProcessSpec(doc["spec"]["horizon"], doc["spec"]["human_actions"],
                           doc["spec"]["machine_actions"])
        keys = [(tuple(n["human"]), tuple(n["machine"])) for n in doc["tree_nodes"]]
        tree = PathTree(spec, keys)
        node_log_prob = {}
        with np.errstate(divide="ignore"):
            for n in doc["tree_nodes"]:
                nid = tree.node_for((tuple(n["human"]), tuple(n["machine"])))
                node_log_prob[(nid, int(n["action"]))] = np.log(
                    np.asarray(n["probs"], dtype=float))
            step = np.log(np.asarray(doc["step_probs"], dtype=float))
        norm = np.asarray(doc["step_log_norm"], dtype=float)
        return cls(spec, step, norm, tree, node_log_prob)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "StructuredHumanModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# Views: adapt models (or raw tables) to a common working tree.
# ---------------------------------------------------------------------------


class PolicyFlowView:
    """Machine policy looked up through a working tree's node ids."""

    def __init__(self, policy: StructuredMachinePolicy, tree: PathTree):
        self.policy = policy
        self._remap = tree.remap_to(policy.tree)
        self.spec = policy.spec

    def step_probs(self, t: int) -> np.ndarray:
        return self.policy.step_probs(t)

    def step_probs_all(self) -> np.ndarray:
        return np.exp(self.policy.step_log_prob)

    def node_probs(self, nid: int, t: int) -> np.ndarray:
        oid = self._remap[nid]
        if oid < 0:
            return self.policy.step_probs(t)
        return self.policy.node_probs(oid)


class HumanFlowView:
    """Human model looked up through a working tree's node ids.

    Wraps a structured model or, for synthetic table-form humans, a plain
    per-turn conditional array of shape (T, |H|, |M|).
    """

    def __init__(self, model: StructuredHumanModel | np.ndarray, tree: PathTree):
        if isinstance(model, StructuredHumanModel):
            self.model = model
            self._tables = None
            self._remap = tree.remap_to(model.tree)
        else:
            self.model = None
            self._tables = np.asarray(model, dtype=float)
            self._remap = None

    def step_probs(self, t: int) -> np.ndarray:
        if self._tables is not None:
            return self._tables[t - 1]
        return self.model.step_probs(t)

    def step_probs_all(self) -> np.ndarray:
        if self._tables is not None:
            return self._tables
        return np.exp(self.model.step_log_prob)

    def node_probs(self, nid: int, m: int, t: int) -> np.ndarray:
        if self._tables is not None:
            return self._tables[t - 1, :, m]
        oid = self._remap[nid]
        if oid < 0:
            return self.model.step_probs(t)[:, m]
        return self.model.node_probs(oid, m)


# ---------------------------------------------------------------------------
# Forward flows: prefix-tree occupation masses and per-turn joint marginals.
# ---------------------------------------------------------------------------


@dataclass
class FlowResult:
    tree: PathTree
    node_mass: np.ndarray          # (n_nodes,) probability of riding to each node
    on_mass: np.ndarray            # (T+1,) total mass still on the tree per level
    step_joint: np.ndarray         # (T, |H|, |M|) marginal of (H_t, M_t)


def forward_flows(human: HumanFlowView, policy: PolicyFlowView,
                  tree: PathTree, spec: ProcessSpec) -> FlowResult:
    T, H, M = spec.horizon, spec.n_human, spec.n_machine
    node_mass = np.zeros(len(tree))
    node_mass[0] = 1.0
    on_mass = np.zeros(T + 1)
    on_mass[0] = 1.0
    if len(tree) == 1:
        # no tracked supports: everything factorizes turn by turn
        step_joint = human.step_probs_all() * policy.step_probs_all()[:, None, :]
        return FlowResult(tree, node_mass, on_mass, step_joint)
    step_joint = np.zeros((T, H, M))
    for t in range(1, T + 1):
        prev = tree.at_level(t - 1)
        off_prev = max(0.0, 1.0 - float(sum(node_mass[u] for u in prev)))
        joint = off_prev * (human.step_probs(t) * policy.step_probs(t)[None, :])
        for u in prev:
            pu = node_mass[u]
            if pu == 0.0:
                q = policy.node_probs(u, t)
                for (m, h), child in tree.nodes[u].children.items():
                    node_mass[child] = 0.0
                continue
            q = policy.node_probs(u, t)
            on_machine = tree.nodes[u].machine_actions()
            for m in range(M):
                w = pu * q[m]
                if m not in on_machine:
                    joint[:, m] += w * human.step_probs(t)[:, m]
                    continue
                ph = human.node_probs(u, m, t)
                for h in range(H):
                    child = tree.child(u, m, h)
                    if child is not None:
                        node_mass[child] = w * ph[h]
                        joint[h, m] += w * ph[h]
                    else:
                        joint[h, m] += w * ph[h]
        step_joint[t - 1] = joint
        on_mass[t] = float(sum(node_mass[u] for u in tree.at_level(t)))
    return FlowResult(tree, node_mass, on_mass, step_joint)


# ---------------------------------------------------------------------------
# Expectations of structured features and causal entropies under the flows.
# ---------------------------------------------------------------------------


@dataclass
class ResolvedFeature:
    """A feature's structural pieces bound to a specific working tree."""

    tables: np.ndarray | None
    node_terms: dict[int, float]
    machine_terms: dict[tuple[int, int], float]


def resolve_feature(feature, tree: PathTree, spec: ProcessSpec) -> ResolvedFeature:
    node_terms: dict[int, float] = {}
    for key, val in feature.prefix_terms(spec).items():
        nid = tree.node_for(key)
        if nid is None:
            raise ValueError(f"feature prefix {key} missing from working tree")
        node_terms[nid] = node_terms.get(nid, 0.0) + val
    machine_terms: dict[tuple[int, int], float] = {}
    for (key, m), val in feature.machine_step_terms(spec).items():
        nid = tree.node_for(key)
        if nid is None:
            raise ValueError(f"feature prefix {key} missing from working tree")
        machine_terms[(nid, m)] = machine_terms.get((nid, m), 0.0) + val
    return ResolvedFeature(feature.step_tables(spec), node_terms, machine_terms)


def feature_prefixes(feature, spec: ProcessSpec) -> list[PrefixKey]:
    keys = list(feature.prefix_terms(spec).keys())
    keys.extend(key for key, _m in feature.machine_step_terms(spec).keys())
    return keys


def expected_value(resolved: ResolvedFeature, flows: FlowResult,
                   policy: PolicyFlowView, tree: PathTree) -> float:
    total = 0.0
    if resolved.tables is not None:
        total += float(np.sum(flows.step_joint * resolved.tables))
    for nid, val in resolved.node_terms.items():
        total += flows.node_mass[nid] * val
    for (nid, m), val in resolved.machine_terms.items():
        pu = flows.node_mass[nid]
        if pu > 0.0:
            t = tree.nodes[nid].level + 1
            total += pu * policy.node_probs(nid, t)[m] * val
    return total


def _entropy_rows(p: np.ndarray, axis: int) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis)


def machine_causal_entropy(flows: FlowResult, policy: PolicyFlowView,
                           tree: PathTree, spec: ProcessSpec) -> float:
    if len(tree) == 1:
        return float(_entropy_rows(policy.step_probs_all(), axis=1).sum())
    total = 0.0
    for t in range(1, spec.horizon + 1):
        prev = tree.at_level(t - 1)
        on = 0.0
        for u in prev:
            pu = flows.node_mass[u]
            if pu > 0.0:
                total += pu * entropy(policy.node_probs(u, t))
                on += pu
        total += max(0.0, 1.0 - on) * entropy(policy.step_probs(t))
    return total


def human_causal_entropy(flows: FlowResult, human: HumanFlowView,
                         policy: PolicyFlowView, tree: PathTree,
                         spec: ProcessSpec) -> float:
    if len(tree) == 1:
        per_action = _entropy_rows(human.step_probs_all(), axis=1)  # (T, |M|)
        return float((policy.step_probs_all() * per_action).sum())
    total = 0.0
    for t in range(1, spec.horizon + 1):
        step = human.step_probs(t)
        step_ent = np.array([entropy(step[:, m]) for m in range(spec.n_machine)])
        prev = tree.at_level(t - 1)
        on = 0.0
        for u in prev:
            pu = flows.node_mass[u]
            if pu == 0.0:
                continue
            on += pu
            q = policy.node_probs(u, t)
            on_machine = tree.nodes[u].machine_actions()
            for m in range(spec.n_machine):
                if q[m] == 0.0:
                    continue
                ent = (entropy(human.node_probs(u, m, t)) if m in on_machine
                       else step_ent[m])
                total += pu * q[m] * ent
        off = max(0.0, 1.0 - on)
        if off > 0.0:
            total += off * masked_dot(policy.step_probs(t), step_ent)
    return total
