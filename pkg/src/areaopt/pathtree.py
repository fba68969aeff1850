"""Prefix tree over the supports of path-anchored trajectory functions.

Nodes are the distinct interaction prefixes (h^t, m^t) appearing in any
tracked support.  The root is the empty prefix.  Off this tree the fast
recursions collapse to per-turn tables; on it they carry per-node
corrections, so the tree's size bounds the extra work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .features import PrefixKey
from .process import ProcessSpec


@dataclass
class TreeNode:
    level: int
    parent: int
    edge: tuple[int, int] | None          # (machine action, human action) from parent
    children: dict[tuple[int, int], int] = field(default_factory=dict)

    def machine_actions(self) -> set[int]:
        return {m for (m, _h) in self.children}


class PathTree:
    """Immutable-after-build prefix tree with integer node ids, root id 0."""

    def __init__(self, spec: ProcessSpec, prefixes: list[PrefixKey] | None = None):
        self.spec = spec
        self.nodes: list[TreeNode] = [TreeNode(0, -1, None)]
        self._by_key: dict[PrefixKey, int] = {((), ()): 0}
        for key in sorted(set(prefixes or [])):
            self._insert(key)
        self._levels: list[list[int]] = [[] for _ in range(spec.horizon + 1)]
        for nid, node in enumerate(self.nodes):
            self._levels[node.level].append(nid)

    def _insert(self, key: PrefixKey) -> int:
        hs, ms = key
        if len(hs) != len(ms):
            raise ValueError("prefix parts differ in length")
        if len(hs) > self.spec.horizon:
            raise ValueError("prefix longer than horizon")
        nid = 0
        for t in range(len(hs)):
            edge = (ms[t], hs[t])
            node = self.nodes[nid]
            child = node.children.get(edge)
            if child is None:
                child = len(self.nodes)
                self.nodes.append(TreeNode(t + 1, nid, edge))
                node.children[edge] = child
                self._by_key[(hs[:t + 1], ms[:t + 1])] = child
            nid = child
        return nid

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def n_levels(self) -> int:
        return len(self._levels)

    def at_level(self, level: int) -> list[int]:
        return self._levels[level]

    def node_for(self, key: PrefixKey) -> int | None:
        return self._by_key.get(key)

    def key_for(self, nid: int) -> PrefixKey:
        hs: list[int] = []
        ms: list[int] = []
        while nid != 0:
            node = self.nodes[nid]
            m, h = node.edge
            hs.append(h)
            ms.append(m)
            nid = node.parent
        return (tuple(reversed(hs)), tuple(reversed(ms)))

    def child(self, nid: int, m: int, h: int) -> int | None:
        return self.nodes[nid].children.get((m, h))

    def on_machine(self, nid: int, m: int) -> bool:
        return m in self.nodes[nid].machine_actions()

    def keys(self) -> list[PrefixKey]:
        return [self.key_for(nid) for nid in range(len(self.nodes))]

    def remap_to(self, other: "PathTree") -> list[int]:
        """For each node here, the id of the identical prefix in ``other`` or -1."""
        out = [-1] * len(self.nodes)
        out[0] = 0
        for nid in range(1, len(self.nodes)):
            node = self.nodes[nid]
            par = out[node.parent]
            if par < 0:
                continue
            m, h = node.edge
            hit = other.child(par, m, h)
            out[nid] = -1 if hit is None else hit
        return out

    def step(self, nid: int | None, m: int, h: int) -> int | None:
        """Advance a tree walk by one full turn; None once off the tree."""
        if nid is None:
            return None
        return self.child(nid, m, h)


def union_tree(spec: ProcessSpec, *prefix_groups) -> PathTree:
    """Tree over the union of several prefix collections (lists or trees)."""
    keys: list[PrefixKey] = []
    for group in prefix_groups:
        if group is None:
            continue
        if isinstance(group, PathTree):
            keys.extend(group.keys())
        else:
            keys.extend(group)
    keys = [k for k in keys if len(k[0]) > 0]
    return PathTree(spec, keys)
