"""Interaction process: turn structure, causal conditional tables, exact joints.

An interaction runs for ``horizon`` turns.  At turn t the machine acts first
(its action may depend on everything before turn t), then the human responds
(its action may additionally depend on the machine's current action).  A
"causal conditional table" holds, for one side, the conditional distribution
of that side's action at every turn given every reachable history.

Dense tables enumerate histories explicitly and are only usable for small
horizons; they are the ground truth the structured representations elsewhere
in the package are checked against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

#: Default ceiling on |H|^T * |M|^T for dense joint construction.
DEFAULT_JOINT_CAP = 10_000_000

HUMAN = "human"
MACHINE = "machine"


class CapExceededError(RuntimeError):
    """Raised when a dense operation would enumerate too many trajectories."""


class SpecMismatchError(ValueError):
    """Raised when two objects built on different process specs are combined."""


@dataclass(frozen=True)
class ProcessSpec:
    """Shape of the interaction: horizon and both action alphabets.

    Actions are integers ``0..n_human-1`` and ``0..n_machine-1``.
    """

    horizon: int
    n_human: int
    n_machine: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.n_human < 1 or self.n_machine < 1:
            raise ValueError("alphabet sizes must be >= 1")

    @property
    def n_trajectories(self) -> int:
        return (self.n_human * self.n_machine) ** self.horizon

    def check_cap(self, cap: int | None = None) -> None:
        cap = DEFAULT_JOINT_CAP if cap is None else cap
        if self.n_trajectories > cap:
            raise CapExceededError(
                f"{self.n_trajectories} trajectories exceed cap {cap}"
            )


@dataclass(frozen=True)
class Trajectory:
    """One realized interaction: the human and machine action sequences."""

    human: tuple[int, ...]
    machine: tuple[int, ...]

    def validate(self, spec: ProcessSpec) -> None:
        if len(self.human) != spec.horizon or len(self.machine) != spec.horizon:
            raise ValueError("trajectory length does not match horizon")
        if any(h < 0 or h >= spec.n_human for h in self.human):
            raise ValueError("human action out of range")
        if any(m < 0 or m >= spec.n_machine for m in self.machine):
            raise ValueError("machine action out of range")


# ---------------------------------------------------------------------------
# History packing.
#
# Histories are packed into a single integer in chronological, interleaved
# mixed radix: the code of (m_1, h_1, ..., m_t, h_t) is obtained by starting
# from 0 and repeatedly appending the machine action (radix |M|) then the
# human action (radix |H|).  Appending is ``code * radix + action``, so the
# code of any prefix is a prefix of the code arithmetic; this keeps the
# backward recursions pure index manipulation.
# ---------------------------------------------------------------------------


def pack_trajectory(spec: ProcessSpec, traj: Trajectory) -> int:
    code = 0
    for m, h in zip(traj.machine, traj.human):
        code = (code * spec.n_machine + m) * spec.n_human + h
    return code


def unpack_trajectory(spec: ProcessSpec, code: int) -> Trajectory:
    hs: list[int] = []
    ms: list[int] = []
    for _ in range(spec.horizon):
        code, h = divmod(code, spec.n_human)
        code, m = divmod(code, spec.n_machine)
        hs.append(h)
        ms.append(m)
    return Trajectory(tuple(reversed(hs)), tuple(reversed(ms)))


def n_machine_histories(spec: ProcessSpec, t: int) -> int:
    """Number of (h^{t-1}, m^{t-1}) histories conditioning the machine at turn t."""
    return (spec.n_human * spec.n_machine) ** (t - 1)


def n_human_histories(spec: ProcessSpec, t: int) -> int:
    """Number of (h^{t-1}, m^t) histories conditioning the human at turn t."""
    return n_machine_histories(spec, t) * spec.n_machine


def pack_history(spec: ProcessSpec, side: str,
                 human_prefix: tuple[int, ...], machine_prefix: tuple[int, ...]) -> int:
    """Pack a conditioning history for ``side`` at turn len(machine_prefix) (+1 for machine)."""
    if side == HUMAN:
        if len(machine_prefix) != len(human_prefix) + 1:
            raise ValueError("human history needs one more machine action")
    elif side == MACHINE:
        if len(machine_prefix) != len(human_prefix):
            raise ValueError("machine history needs equal-length prefixes")
    else:
        raise ValueError(f"unknown side {side!r}")
    code = 0
    for i, m in enumerate(machine_prefix):
        code = code * spec.n_machine + m
        if i < len(human_prefix):
            code = code * spec.n_human + human_prefix[i]
    return code


def unpack_history(spec: ProcessSpec, side: str, t: int, code: int
                   ) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Inverse of :func:`pack_history` for the turn-``t`` conditioning history."""
    n_h = t - 1
    n_m = t if side == HUMAN else t - 1
    hs: list[int] = []
    ms: list[int] = []
    if side == HUMAN:
        code, m = divmod(code, spec.n_machine)
        ms.append(m)
    for _ in range(n_h):
        code, h = divmod(code, spec.n_human)
        code, m = divmod(code, spec.n_machine)
        hs.append(h)
        ms.append(m)
    if code != 0:
        raise ValueError("history code out of range")
    hs.reverse()
    ms.reverse()
    assert len(hs) == n_h and len(ms) == n_m
    return tuple(hs), tuple(ms)


# ---------------------------------------------------------------------------
# Dense causal conditional tables.
# ---------------------------------------------------------------------------

NORMALIZATION_TOL = 1e-12


@dataclass
class DenseCausalTable:
    """Explicit per-history conditional distributions for one side.

    ``tables[t-1]`` has shape ``(n_histories(t), alphabet)`` and each row is a
    probability vector over that side's actions.  Rows with zeros are legal;
    logs of zero entries are ``-inf`` and propagate as zero mass.
    """

    spec: ProcessSpec
    side: str
    tables: list[np.ndarray]

    def __post_init__(self):
        if self.side not in (HUMAN, MACHINE):
            raise ValueError(f"unknown side {self.side!r}")
        if len(self.tables) != self.spec.horizon:
            raise ValueError("need one table per turn")
        for t, tab in enumerate(self.tables, start=1):
            want = (self.n_histories(t), self.alphabet)
            if tab.shape != want:
                raise ValueError(f"turn {t} table has shape {tab.shape}, want {want}")

    @property
    def alphabet(self) -> int:
        return self.spec.n_human if self.side == HUMAN else self.spec.n_machine

    def n_histories(self, t: int) -> int:
        if self.side == HUMAN:
            return n_human_histories(self.spec, t)
        return n_machine_histories(self.spec, t)

    def log_tables(self) -> list[np.ndarray]:
        out = []
        with np.errstate(divide="ignore"):
            for tab in self.tables:
                out.append(np.log(tab))
        return out

    @classmethod
    def uniform(cls, spec: ProcessSpec, side: str) -> "DenseCausalTable":
        size = spec.n_human if side == HUMAN else spec.n_machine
        tables = []
        for t in range(1, spec.horizon + 1):
            n = (n_human_histories(spec, t) if side == HUMAN
                 else n_machine_histories(spec, t))
            tables.append(np.full((n, size), 1.0 / size))
        return cls(spec, side, tables)

    @classmethod
    def random(cls, spec: ProcessSpec, side: str, rng: np.random.Generator,
               concentration: float = 1.0) -> "DenseCausalTable":
        size = spec.n_human if side == HUMAN else spec.n_machine
        tables = []
        for t in range(1, spec.horizon + 1):
            n = (n_human_histories(spec, t) if side == HUMAN
                 else n_machine_histories(spec, t))
            tables.append(rng.dirichlet(np.full(size, concentration), size=n))
        return cls(spec, side, tables)

    def to_json(self) -> dict:
        entries = []
        for t in range(1, self.spec.horizon + 1):
            tab = self.tables[t - 1]
            for code in range(tab.shape[0]):
                hs, ms = unpack_history(self.spec, self.side, t, code)
                # History is serialized chronologically interleaved:
                # m_1, h_1, m_2, h_2, ... (trailing m_t for the human side).
                hist: list[int] = []
                for i, m in enumerate(ms):
                    hist.append(m)
                    if i < len(hs):
                        hist.append(hs[i])
                entries.append({"t": t, "history": hist,
                                "probs": [float(p) for p in tab[code]]})
        return {
            "spec": {"horizon": self.spec.horizon,
                     "human_actions": self.spec.n_human,
                     "machine_actions": self.spec.n_machine},
            "side": self.side,
            "entries": entries,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DenseCausalTable":
        spec = ProcessSpec(doc["spec"]["horizon"], doc["spec"]["human_actions"],
                           doc["spec"]["machine_actions"])
        side = doc["side"]
        size = spec.n_human if side == HUMAN else spec.n_machine
        tables = []
        for t in range(1, spec.horizon + 1):
            n = (n_human_histories(spec, t) if side == HUMAN
                 else n_machine_histories(spec, t))
            tables.append(np.full((n, size), np.nan))
        for entry in doc["entries"]:
            t = entry["t"]
            hist = entry["history"]
            ms = tuple(hist[0::2])
            hs = tuple(hist[1::2])
            code = pack_history(spec, side, hs, ms)
            tables[t - 1][code] = entry["probs"]
        for t, tab in enumerate(tables, start=1):
            if np.isnan(tab).any():
                raise ValueError(f"missing histories at turn {t}")
        return cls(spec, side, tables)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "DenseCausalTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class TableViolation:
    t: int
    history: int
    defect: str


def validate_causal(table: DenseCausalTable) -> list[TableViolation]:
    """Report every non-normalized or negative conditional row.  Never raises."""
    out: list[TableViolation] = []
    for t in range(1, table.spec.horizon + 1):
        tab = table.tables[t - 1]
        sums = tab.sum(axis=1)
        for code in np.nonzero(np.abs(sums - 1.0) > NORMALIZATION_TOL)[0]:
            out.append(TableViolation(t, int(code),
                                      f"row sums to {sums[code]:.15g}"))
        for code in np.nonzero((tab < 0).any(axis=1))[0]:
            out.append(TableViolation(t, int(code),
                                      f"negative entry {tab[code].min():.15g}"))
    return out


def _require_valid(table: DenseCausalTable) -> None:
    bad = validate_causal(table)
    if bad:
        v = bad[0]
        raise ValueError(f"unnormalized {table.side} table at t={v.t}: {v.defect}")


# ---------------------------------------------------------------------------
# Exact joint distribution and causal entropies.
# ---------------------------------------------------------------------------


@dataclass
class JointDistribution:
    """Exact joint over full trajectories, indexed by the packed code."""

    spec: ProcessSpec
    log_mass: np.ndarray = field(repr=False)

    def mass(self, traj: Trajectory) -> float:
        traj.validate(self.spec)
        return float(np.exp(self.log_mass[pack_trajectory(self.spec, traj)]))

    def items(self):
        for code in range(self.spec.n_trajectories):
            yield unpack_trajectory(self.spec, code), float(np.exp(self.log_mass[code]))

    def total(self) -> float:
        return float(np.exp(self.log_mass).sum())


def _forward_prefix_masses(P: DenseCausalTable, Q: DenseCausalTable,
                           cap: int | None = None):
    """Log-masses of all (h^t, m^t) prefixes, one array per turn.

    Returns ``(machine_hist_logmass, human_hist_logmass)`` where the t-th
    entry of the first list indexes (h^{t-1}, m^{t-1}) codes and of the
    second (h^{t-1}, m^t) codes.
    """
    spec = P.spec
    logP = P.log_tables()
    logQ = Q.log_tables()
    machine_masses = []
    human_masses = []
    cur = np.zeros(1)  # log-mass of the empty prefix
    for t in range(1, spec.horizon + 1):
        machine_masses.append(cur)
        cur = (cur[:, None] + logQ[t - 1]).reshape(-1)  # append m_t
        human_masses.append(cur)
        cur = (cur[:, None] + logP[t - 1]).reshape(-1)  # append h_t
    return machine_masses, human_masses, cur


def factorize_joint(P: DenseCausalTable, Q: DenseCausalTable,
                    cap: int | None = None) -> JointDistribution:
    """Exact joint: product of both sides' sequential conditionals."""
    if P.spec != Q.spec:
        raise SpecMismatchError("tables built on different process specs")
    if P.side != HUMAN or Q.side != MACHINE:
        raise ValueError("expected a human table and a machine table")
    P.spec.check_cap(cap)
    _require_valid(P)
    _require_valid(Q)
    _, _, full = _forward_prefix_masses(P, Q)
    return JointDistribution(P.spec, full)


def causal_entropy(side: str, P: DenseCausalTable, Q: DenseCausalTable,
                   cap: int | None = None) -> float:
    """Expected negative log of one side's causally conditioned product (nats).

    Computed by the chain rule: the mass-weighted sum of per-history
    conditional entropies of the chosen side.
    """
    if P.spec != Q.spec:
        raise SpecMismatchError("tables built on different process specs")
    P.spec.check_cap(cap)
    _require_valid(P)
    _require_valid(Q)
    machine_hist, human_hist, _ = _forward_prefix_masses(P, Q)
    table = Q if side == MACHINE else P
    masses = machine_hist if side == MACHINE else human_hist
    total = 0.0
    for t in range(1, P.spec.horizon + 1):
        w = np.exp(masses[t - 1])
        rows = table.tables[t - 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(rows > 0.0, rows * np.log(rows), 0.0)
        total -= float(w @ plogp.sum(axis=1))
    return total


def expect_function(P: DenseCausalTable, Q: DenseCausalTable, fn,
                    cap: int | None = None) -> float:
    """Expectation of a trajectory function under the exact joint."""
    joint = factorize_joint(P, Q, cap)
    total = 0.0
    for traj, mass in joint.items():
        if mass > 0.0:
            total += mass * fn(traj)
    return total
