"""Experiment configuration: versioned JSON schema, loading, and builders."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .estimation import EstimationOptions
from .features import (DecomposableFeature, Feature, PathFeature,
                       RewardFunction, TABLE_BUILDERS, path_with_prefixes)
from .lca import (LcaParams, fit_gibbs_human, fit_markov_human,
                  sample_interactions)
from .loop import AreaOptions, MomentSource
from .process import DenseCausalTable, ProcessSpec, Trajectory
from .qlearn import QlParams
from .structured import StructuredMachinePolicy


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries the field path."""


_PATH_SCHEMA = {
    "type": "object",
    "required": ["human", "machine"],
    "properties": {
        "human": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "machine": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "coefficient": {"type": "number"},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "process", "gamma", "reward", "features", "seed"],
    "properties": {
        "version": {"const": 1},
        "process": {
            "type": "object",
            "required": ["horizon", "human_actions", "machine_actions"],
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "human_actions": {"type": "integer", "minimum": 1},
                "machine_actions": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "gamma": {"type": "number", "minimum": 0},
        "reward": {
            "type": "object",
            "properties": {
                "builder": {"type": "string"},
                "params": {"type": "object"},
                "paths": {"type": "array", "items": _PATH_SCHEMA},
            },
            "additionalProperties": False,
        },
        "features": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id"],
                "properties": {
                    "id": {"type": "string"},
                    "from_reward": {"type": "boolean"},
                    "builder": {"type": "string"},
                    "params": {"type": "object"},
                    "kind": {"enum": ["table", "path", "prefix-family"]},
                    "path": _PATH_SCHEMA,
                },
                "additionalProperties": False,
            },
        },
        "inequality": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "threshold"],
                "properties": {
                    "id": {"type": "string"},
                    "builder": {"type": "string"},
                    "params": {"type": "object"},
                    "threshold": {"type": "number"},
                },
                "additionalProperties": False,
            },
        },
        "human": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["lca", "lca-markov-fit", "lca-gibbs-fit",
                                  "markov-random", "markov-table"]},
                "params": {"type": "object"},
                "fit_samples": {"type": "integer", "minimum": 1},
                "concentration": {"type": "number", "exclusiveMinimum": 0},
                "values": {"type": "array"},
            },
            "additionalProperties": False,
        },
        "moments": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["exact", "sampled"]},
                "samples_per_iteration": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "area": {
            "type": "object",
            "properties": {
                "iterations": {"type": "integer", "minimum": 0},
                "policy_tol": {"type": "number", "exclusiveMinimum": 0},
                "objective_tol": {"type": "number", "exclusiveMinimum": 0},
                "stop_on_convergence": {"type": "boolean"},
                "step_constraint": {"type": "boolean"},
                "estimation": {
                    "type": "object",
                    "properties": {
                        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                        "schedule": {"enum": ["inverse-sqrt", "constant"]},
                        "max_iters": {"type": "integer", "minimum": 1},
                        "grad_tol": {"type": "number", "exclusiveMinimum": 0},
                        "moment_tol": {"type": "number", "exclusiveMinimum": 0},
                        "divergence_bound": {"type": "number", "exclusiveMinimum": 0},
                        "polish": {"type": "boolean"},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "qlearning": {
            "type": "object",
            "properties": {
                "learning_rate": {"type": "number"},
                "discount": {"type": "number"},
                "softmax_scale": {"type": "number"},
                "memory": {"type": "integer", "minimum": 1},
                "episodes": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "convergence": {
            "type": "object",
            "properties": {
                "sample_sizes": {"type": "array",
                                 "items": {"type": "integer", "minimum": 1}},
                "include_exact": {"type": "boolean"},
                "seeds": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "rounds": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


def validate_document(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        msgs = [f"{e.json_path}: {e.message}" for e in errors[:5]]
        raise ConfigError("; ".join(msgs))


def _build_table(spec: ProcessSpec, builder: str, params: dict) -> np.ndarray:
    if builder == "inline":
        values = np.asarray(params["values"], dtype=float)
        return values
    fn = TABLE_BUILDERS.get(builder)
    if fn is None:
        raise ConfigError(f"unknown table builder {builder!r}")
    try:
        return fn(spec, **params)
    except TypeError as exc:
        raise ConfigError(f"builder {builder!r}: {exc}") from exc


def _build_path(spec: ProcessSpec, doc: dict, id: str) -> PathFeature:
    traj = Trajectory(tuple(doc["human"]), tuple(doc["machine"]))
    traj.validate(spec)
    return PathFeature(id, traj, float(doc.get("coefficient", 1.0)))


@dataclass
class ExperimentConfig:
    doc: dict
    spec: ProcessSpec
    gamma: float
    reward: RewardFunction
    features: list[Feature]
    inequality: list[tuple[Feature, float]]
    human: object
    moments_kind: str
    samples_per_iteration: int
    area: AreaOptions
    qlearning: QlParams
    ql_episodes: int
    rounds: int
    seed: int
    convergence_sample_sizes: list[int]
    convergence_include_exact: bool
    convergence_seeds: int

    def config_hash(self) -> str:
        blob = json.dumps(self.doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def moment_source(self) -> MomentSource:
        return MomentSource(self.moments_kind, self.human,
                            self.samples_per_iteration)


def _build_human(spec: ProcessSpec, doc: dict, seed: int,
                 features: list[Feature]):
    kind = doc.get("kind", "lca")
    params = doc.get("params", {})
    if kind == "lca":
        return LcaParams(**params) if params else LcaParams()
    if kind in ("lca-markov-fit", "lca-gibbs-fit"):
        lca = LcaParams(**params) if params else LcaParams()
        n = int(doc.get("fit_samples", 20000))
        policy = StructuredMachinePolicy.uniform(spec)
        batch = sample_interactions(policy, lca, n, seed)
        if kind == "lca-markov-fit":
            return fit_markov_human(batch)
        return fit_gibbs_human(batch, features)
    if kind == "markov-random":
        rng = np.random.default_rng(seed)
        conc = float(doc.get("concentration", 1.0))
        draws = rng.dirichlet(np.full(spec.n_human, conc),
                              size=(spec.horizon, spec.n_machine))
        return draws.transpose(0, 2, 1)       # (T, |H|, |M|)
    if kind == "markov-table":
        values = np.asarray(doc["values"], dtype=float)
        want = (spec.horizon, spec.n_human, spec.n_machine)
        if values.shape != want:
            raise ConfigError(f"human.values shape {values.shape}, want {want}")
        return values
    raise ConfigError(f"unknown human kind {kind!r}")


def parse_config(doc: dict) -> ExperimentConfig:
    validate_document(doc)
    p = doc["process"]
    spec = ProcessSpec(p["horizon"], p["human_actions"], p["machine_actions"])
    gamma = float(doc["gamma"])
    seed = int(doc["seed"])

    rdoc = doc["reward"]
    per_step = (_build_table(spec, rdoc["builder"], rdoc.get("params", {}))
                if "builder" in rdoc
                else np.zeros((spec.horizon, spec.n_human, spec.n_machine)))
    if per_step.shape != (spec.horizon, spec.n_human, spec.n_machine):
        raise ConfigError(f"reward table has shape {per_step.shape}")
    paths = tuple(_build_path(spec, d, f"reward.path{i}")
                  for i, d in enumerate(rdoc.get("paths", [])))
    reward = RewardFunction(per_step, paths)

    features: list[Feature] = []
    for fdoc in doc["features"]:
        fid = fdoc["id"]
        if fdoc.get("from_reward"):
            features.append(reward.as_feature(fid))
        elif fdoc.get("kind") == "path":
            features.append(_build_path(spec, fdoc["path"], fid))
        elif fdoc.get("kind") == "prefix-family":
            base = _build_path(spec, fdoc["path"], fid)
            if len(base.path.human) != spec.horizon:
                raise ConfigError(f"feature {fid}: prefix family needs a "
                                  "full-horizon path")
            features.extend(path_with_prefixes(fid, base.path, base.coefficient))
        elif "builder" in fdoc:
            features.append(DecomposableFeature(
                fid, _build_table(spec, fdoc["builder"], fdoc.get("params", {}))))
        else:
            raise ConfigError(f"feature {fid}: no builder, kind, or from_reward")
    inequality: list[tuple[Feature, float]] = []
    for fdoc in doc.get("inequality", []):
        feat = DecomposableFeature(
            fdoc["id"], _build_table(spec, fdoc["builder"], fdoc.get("params", {})))
        inequality.append((feat, float(fdoc["threshold"])))

    human = _build_human(spec, doc.get("human", {"kind": "lca"}), seed, features)
    mdoc = doc.get("moments", {"kind": "sampled", "samples_per_iteration": 10})
    moments_kind = mdoc["kind"]
    samples = int(mdoc.get("samples_per_iteration", 10))
    if moments_kind == "exact" and isinstance(human, LcaParams):
        raise ConfigError("moments.kind=exact needs a table-form human "
                          "(use lca-markov-fit, markov-random, or markov-table)")

    adoc = doc.get("area", {})
    edoc = adoc.get("estimation", {})
    estimation = EstimationOptions(**edoc) if edoc else EstimationOptions()
    area = AreaOptions(
        gamma=gamma,
        iterations=int(adoc.get("iterations", 10)),
        estimation=estimation,
        policy_tol=float(adoc.get("policy_tol", 1e-8)),
        objective_tol=float(adoc.get("objective_tol", 1e-6)),
        stop_on_convergence=bool(adoc.get("stop_on_convergence", False)),
        use_step_constraint=bool(adoc.get("step_constraint", True)),
    )

    qdoc = dict(doc.get("qlearning", {}))
    ql_episodes = int(qdoc.pop("episodes", 100))
    qlearning = QlParams(**qdoc)

    cdoc = doc.get("convergence", {})
    try:
        return ExperimentConfig(
            doc=doc, spec=spec, gamma=gamma, reward=reward, features=features,
            inequality=inequality, human=human, moments_kind=moments_kind,
            samples_per_iteration=samples, area=area, qlearning=qlearning,
            ql_episodes=ql_episodes, rounds=int(doc.get("rounds", 1)),
            seed=seed,
            convergence_sample_sizes=list(cdoc.get("sample_sizes", [10, 100, 1000])),
            convergence_include_exact=bool(cdoc.get("include_exact", True)),
            convergence_seeds=int(cdoc.get("seeds", 5)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc}") from exc
    if seed_override is not None:
        doc = copy.deepcopy(doc)
        doc["seed"] = int(seed_override)
    try:
        return parse_config(doc)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
