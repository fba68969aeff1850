"""Experiment drivers: config-declared runs, the two evaluation studies,
and the scaling benchmark.

Every driver writes delimited data, a rendered figure for the report
commands, and a manifest carrying the config hash and seed needed to rerun
byte-identically (wall-clock columns aside).
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
import scipy.stats

from . import __version__, report
from .config import ExperimentConfig
from .estimation import DualVariables, EstimationOptions
from .features import DecomposableFeature, PathFeature, RewardFunction
from .lca import LcaParams, fit_gibbs_human, sample_interactions
from .loop import AreaOptions, AreaTrace, MomentSource, run_area
from .machine import backward_structured as machine_backward
from .machine import extract_policy
from .process import ProcessSpec, Trajectory
from .qlearn import run_qlearning
from .structured import StructuredMachinePolicy

T_CONFIDENCE = 0.90


def derived_seed(master: int, *tags: int) -> int:
    """Deterministic child seed from the master seed and integer tags."""
    return int(np.random.SeedSequence([int(master)] + [int(t) for t in tags])
               .generate_state(1)[0])


def write_manifest(out_dir: Path, command: str, seed: int,
                   outputs: list[str], config: ExperimentConfig | None = None,
                   extra: dict | None = None) -> Path:
    doc = {
        "command": command,
        "seed": int(seed),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "outputs": outputs,
    }
    if config is not None:
        doc["config_hash"] = config.config_hash()
        doc["config"] = config.doc
    if extra:
        doc.update(extra)
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return path


def _pool_map(fn, units, threads: int):
    if threads <= 1:
        return [fn(u) for u in units]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, units))


# ---------------------------------------------------------------------------
# Config-declared pipeline.
# ---------------------------------------------------------------------------


def run_experiment_config(cfg: ExperimentConfig, out_dir,
                          threads: int = 1) -> dict:
    """Run the pipeline a config declares: the alternation, and the
    Q-learning baseline when the config carries a qlearning section."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []

    trace = run_area(cfg.spec, cfg.reward, cfg.features, cfg.inequality,
                     cfg.moment_source(), cfg.area, cfg.seed)
    trace_path = out / "area_trace.csv"
    trace.save_csv(trace_path)
    policy_path = out / "final_policy.json"
    trace.final_policy.save(policy_path)
    outputs += [trace_path.name, policy_path.name]
    if trace.final_human is not None:
        human_path = out / "final_human_model.json"
        trace.final_human.save(human_path)
        outputs.append(human_path.name)

    ql_run = None
    if "qlearning" in cfg.doc:
        if isinstance(cfg.human, LcaParams):
            lca = cfg.human
        else:
            lca = LcaParams()
        ql_run = run_qlearning(cfg.spec, cfg.reward, cfg.qlearning, lca,
                               cfg.ql_episodes, derived_seed(cfg.seed, 91))
        ql_path = out / "qlearn_trace.csv"
        ql_run.save_csv(ql_path)
        outputs.append(ql_path.name)

    write_manifest(out, "run", cfg.seed, outputs, cfg,
                   extra={"area_converged": trace.converged,
                          "area_converged_at": trace.converged_at,
                          "estimation_failures": trace.failures})
    return {"trace": trace, "qlearn": ql_run, "outputs": outputs,
            "out_dir": out}


# ---------------------------------------------------------------------------
# Convergence study: monitor value vs. moment sample size.
# ---------------------------------------------------------------------------


def reproduce_convergence(cfg: ExperimentConfig, out_dir,
                          threads: int = 1) -> dict:
    """Monitor-value series for sampled moments of several sizes plus the
    noise-free series against the calibrated surrogate human."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(cfg.human, LcaParams):
        raise ValueError("the convergence study samples from the accumulator "
                         "human; configure human.kind=lca")

    units = [(n, s) for n in cfg.convergence_sample_sizes
             for s in range(cfg.convergence_seeds)]

    def run_sampled(unit):
        n, s = unit
        source = MomentSource("sampled", cfg.human, n)
        seed = derived_seed(cfg.seed, 1, n, s)
        trace = run_area(cfg.spec, cfg.reward, cfg.features, cfg.inequality,
                         source, cfg.area, seed)
        return (f"N={n}", s, trace.objectives)

    results = _pool_map(run_sampled, units, threads)

    if cfg.convergence_include_exact:
        calibration = sample_interactions(
            StructuredMachinePolicy.uniform(cfg.spec), cfg.human, 20000,
            derived_seed(cfg.seed, 2))
        surrogate = fit_gibbs_human(calibration, cfg.features)
        source = MomentSource("exact", surrogate)
        trace = run_area(cfg.spec, cfg.reward, cfg.features, cfg.inequality,
                         source, cfg.area, derived_seed(cfg.seed, 3))
        results.append(("exact", 0, trace.objectives))
        exact_converged_at = trace.converged_at
    else:
        exact_converged_at = None

    csv_path = out / "convergence.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "seed", "iter", "L"])
        for label, s, values in results:
            for i, v in enumerate(values):
                writer.writerow([label, s, i, f"{v:.12g}"])

    series: dict[str, np.ndarray] = {}
    for label in dict.fromkeys(label for label, _, _ in results):
        stack = np.array([v for lab, _, v in results if lab == label])
        series[label] = stack.mean(axis=0)
    fig_path = out / "convergence.png"
    report.convergence_figure(series, fig_path)

    write_manifest(out, "reproduce-convergence", cfg.seed,
                   [csv_path.name, fig_path.name], cfg,
                   extra={"exact_converged_at": exact_converged_at})
    return {"results": results, "series": series, "csv": csv_path,
            "figure": fig_path, "exact_converged_at": exact_converged_at}


# ---------------------------------------------------------------------------
# Comparison study: alternation vs. Q-learning on equal sample budgets.
# ---------------------------------------------------------------------------


def _area_round_metrics(cfg: ExperimentConfig, seed: int):
    """Per-sample-budget cumulative reward and realized machine entropy."""
    source = MomentSource("sampled", cfg.human, cfg.samples_per_iteration)
    options = AreaOptions(
        gamma=cfg.gamma, iterations=cfg.area.iterations,
        estimation=cfg.area.estimation, policy_tol=cfg.area.policy_tol,
        objective_tol=cfg.area.objective_tol, keep_policies=True,
        use_step_constraint=cfg.area.use_step_constraint)
    trace = run_area(cfg.spec, cfg.reward, cfg.features, cfg.inequality,
                     source, options, seed)
    points = []
    total_reward = 0.0
    total_log_prob = 0.0
    count = 0
    for batch, policy in zip(trace.batches, trace.policies):
        for traj in batch.trajectories:
            total_reward += cfg.reward.evaluate(traj)
            total_log_prob += policy.log_causal_prob(traj)
            count += 1
        points.append((count, total_reward / count, -total_log_prob / count))
    return points


def _ql_round_metrics(cfg: ExperimentConfig, seed: int):
    run = run_qlearning(cfg.spec, cfg.reward, cfg.qlearning, cfg.human,
                        cfg.ql_episodes, seed)
    return [(r.cumulative_samples, r.avg_reward, r.entropy_estimate)
            for r in run.rows]


def _aggregate(per_round: list[list[tuple]], method: str) -> list[dict]:
    """Mean and t-interval across rounds on each method's sample grid."""
    rows = []
    grid = [p[0] for p in per_round[0]]
    n = len(per_round)
    crit = scipy.stats.t.ppf(0.5 + T_CONFIDENCE / 2, n - 1) if n > 1 else 0.0
    for i, samples in enumerate(grid):
        rewards = np.array([r[i][1] for r in per_round])
        entropies = np.array([r[i][2] for r in per_round])
        half = (crit * rewards.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        rows.append({
            "samples_observed": samples,
            "method": method,
            "avg_reward": float(rewards.mean()),
            "entropy": float(entropies.mean()),
            "ci90_low": float(rewards.mean() - half),
            "ci90_high": float(rewards.mean() + half),
        })
    return rows


def reproduce_comparison(cfg: ExperimentConfig, out_dir,
                         threads: int = 1) -> dict:
    """Average reward and machine entropy vs. samples observed, both methods."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(cfg.human, LcaParams):
        raise ValueError("the comparison study samples from the accumulator "
                         "human; configure human.kind=lca")

    area_rounds = _pool_map(
        lambda r: _area_round_metrics(cfg, derived_seed(cfg.seed, 10, r)),
        range(cfg.rounds), threads)
    ql_rounds = _pool_map(
        lambda r: _ql_round_metrics(cfg, derived_seed(cfg.seed, 20, r)),
        range(cfg.rounds), threads)

    rows = _aggregate(area_rounds, "area") + _aggregate(ql_rounds, "qlearning")
    csv_path = out / "comparison.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["samples_observed", "method", "avg_reward", "entropy",
                         "ci90_low", "ci90_high"])
        for r in rows:
            writer.writerow([r["samples_observed"], r["method"],
                             f"{r['avg_reward']:.12g}", f"{r['entropy']:.12g}",
                             f"{r['ci90_low']:.12g}", f"{r['ci90_high']:.12g}"])
    fig_path = out / "comparison.png"
    report.comparison_figure(rows, fig_path)
    write_manifest(out, "reproduce-comparison", cfg.seed,
                   [csv_path.name, fig_path.name], cfg)
    return {"rows": rows, "csv": csv_path, "figure": fig_path}


# ---------------------------------------------------------------------------
# Scaling benchmark.
# ---------------------------------------------------------------------------


def _bench_instance(T: int, seed: int):
    """Fixed-alphabet instance whose tracked paths diverge at the first turn."""
    spec = ProcessSpec(T, 3, 3)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(2):
        hs = tuple(int(x) for x in rng.integers(0, 3, T))
        ms = (i,) + tuple(int(x) for x in rng.integers(0, 3, T - 1))
        paths.append(Trajectory(hs, ms))
    reward = RewardFunction.decomposable(rng.uniform(size=(T, 3, 3)))
    features = [reward.as_feature("reward"),
                DecomposableFeature("follow_like", rng.uniform(size=(T, 3, 3))),
                PathFeature("path0", paths[0], 1.0),
                PathFeature("path1", paths[1], 1.0)]
    duals = DualVariables(0.1 * rng.standard_normal(len(features)), np.zeros(0))
    return spec, reward, features, duals


def bench_scaling(out_dir, horizons=(10, 20, 40, 80), repeats: int = 5,
                  seed: int = 0) -> dict:
    """Time the structured estimation update and machine optimization as the
    horizon grows, and count the stored model entries."""
    from .estimation import _StructuredWork
    from .features import ConstraintSet

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for T in horizons:
        spec, reward, features, duals = _bench_instance(T, seed)
        policy = StructuredMachinePolicy.uniform(spec)
        constraints = ConstraintSet([(f, 0.0) for f in features], [])
        work = _StructuredWork(policy, constraints)
        best_dual = best_machine = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            model = work.backward(duals)
            work.moments(model)
            best_dual = min(best_dual, time.perf_counter() - t0)
            t0 = time.perf_counter()
            values = machine_backward(model, reward, 1.0)
            extract_policy(values)
            best_machine = min(best_machine, time.perf_counter() - t0)
        rows.append({"T": T,
                     "dual_update_ms": best_dual * 1e3,
                     "machine_opt_ms": best_machine * 1e3,
                     "peak_model_entries": model.storage_entries()})

    csv_path = out / "scaling.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "dual_update_ms", "machine_opt_ms",
                         "peak_model_entries"])
        for r in rows:
            writer.writerow([r["T"], f"{r['dual_update_ms']:.6g}",
                             f"{r['machine_opt_ms']:.6g}",
                             r["peak_model_entries"]])
    fig_path = out / "scaling.png"
    report.scaling_figure(rows, fig_path)
    write_manifest(out, "bench-scaling", seed, [csv_path.name, fig_path.name])

    logT = np.log([r["T"] for r in rows])
    logt = np.log([r["dual_update_ms"] for r in rows])
    exponent = float(np.polyfit(logT, logt, 1)[0])
    return {"rows": rows, "csv": csv_path, "figure": fig_path,
            "time_exponent": exponent}
