"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .estimation import estimate_human
from .experiments import (bench_scaling, derived_seed, reproduce_comparison,
                          reproduce_convergence, run_experiment_config,
                          write_manifest)
from .lca import LcaParams, sample_interactions
from .loop import acquire_moments
from .features import ConstraintSet
from .machine import backward_structured, extract_policy, log_partition
from .qlearn import run_qlearning
from .structured import (StructuredHumanModel, StructuredMachinePolicy)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3


def shipped_config(name: str) -> Path:
    return Path(importlib.resources.files("areaopt") / "configs" / name)


def _load(args, default_name: str | None = None) -> ExperimentConfig:
    path = args.config
    if path is None:
        if default_name is None:
            raise ConfigError("--config is required for this command")
        path = shipped_config(default_name)
    return load_config(path, seed_override=args.seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_estimate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    if args.policy:
        policy = StructuredMachinePolicy.load(args.policy)
    else:
        policy = StructuredMachinePolicy.uniform(cfg.spec)
    rng = np.random.default_rng(derived_seed(cfg.seed, 5))
    moments, _ = acquire_moments(cfg.moment_source(), policy, cfg.features, rng)
    constraints = ConstraintSet(list(zip(cfg.features, moments)),
                                list(cfg.inequality))
    result = estimate_human(policy, constraints, cfg.area.estimation,
                            trace_path=out / "solver_trace.csv")
    model_path = out / "human_model.json"
    result.model.save(model_path)
    write_manifest(out, "estimate", cfg.seed,
                   ["solver_trace.csv", model_path.name], cfg,
                   extra={"converged": result.converged,
                          "iterations": result.iterations,
                          "entropy": result.entropy,
                          "duality_gap": result.duality_gap,
                          "max_residual": result.max_residual})
    print(f"estimate: converged={result.converged} "
          f"iterations={result.iterations} entropy={result.entropy:.6g} "
          f"residual={result.max_residual:.3g}")
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_optimize(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    if args.human:
        human = StructuredHumanModel.load(args.human)
    elif not isinstance(cfg.human, LcaParams):
        human = np.asarray(cfg.human, dtype=float)
    else:
        raise ConfigError("optimize needs --human MODEL.json or a table-form "
                          "human in the config")
    values = backward_structured(human, cfg.reward, cfg.gamma)
    policy = extract_policy(values)
    policy_path = out / "policy.json"
    policy.save(policy_path)
    write_manifest(out, "optimize", cfg.seed, [policy_path.name], cfg,
                   extra={"log_partition": log_partition(values),
                          "gamma": cfg.gamma})
    print(f"optimize: log_partition={log_partition(values):.6g}")
    return EXIT_OK


def cmd_area(args) -> int:
    cfg = _load(args)
    result = run_experiment_config(cfg, _out_dir(args), threads=args.threads)
    trace = result["trace"]
    print(f"area: iterations={len(trace.rows)} converged={trace.converged} "
          f"converged_at={trace.converged_at} failures={trace.failures}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    if not isinstance(cfg.human, LcaParams):
        raise ConfigError("simulate draws from the accumulator human; "
                          "configure human.kind=lca")
    if args.policy:
        policy = StructuredMachinePolicy.load(args.policy)
    else:
        policy = StructuredMachinePolicy.uniform(cfg.spec)
    batch = sample_interactions(policy, cfg.human, args.count,
                                derived_seed(cfg.seed, 6))
    batch_path = out / "interactions.csv"
    batch.save_csv(batch_path)
    write_manifest(out, "simulate", cfg.seed, [batch_path.name], cfg,
                   extra={"count": args.count})
    print(f"simulate: wrote {len(batch)} trajectories")
    return EXIT_OK


def cmd_qlearn(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    if not isinstance(cfg.human, LcaParams):
        raise ConfigError("qlearn trains against the accumulator human; "
                          "configure human.kind=lca")
    run = run_qlearning(cfg.spec, cfg.reward, cfg.qlearning, cfg.human,
                        cfg.ql_episodes, derived_seed(cfg.seed, 91))
    trace_path = out / "qlearn_trace.csv"
    run.save_csv(trace_path)
    write_manifest(out, "qlearn", cfg.seed, [trace_path.name], cfg)
    last = run.rows[-1] if run.rows else None
    if last:
        print(f"qlearn: episodes={last.episode} avg_reward={last.avg_reward:.4g} "
              f"entropy={last.entropy_estimate:.4g}")
    else:
        print("qlearn: no episodes")
    return EXIT_OK


def cmd_reproduce_convergence(args) -> int:
    cfg = _load(args, default_name="convergence.json")
    result = reproduce_convergence(cfg, _out_dir(args), threads=args.threads)
    print(f"reproduce-convergence: wrote {result['csv'].name} and "
          f"{result['figure'].name}; exact series converged at iteration "
          f"{result['exact_converged_at']}")
    return EXIT_OK


def cmd_reproduce_comparison(args) -> int:
    cfg = _load(args, default_name="comparison.json")
    result = reproduce_comparison(cfg, _out_dir(args), threads=args.threads)
    final = {r["method"]: r for r in result["rows"]
             if r["samples_observed"] == max(x["samples_observed"]
                                             for x in result["rows"]
                                             if x["method"] == r["method"])}
    for method, row in sorted(final.items()):
        print(f"reproduce-comparison [{method}]: reward={row['avg_reward']:.4g} "
              f"entropy={row['entropy']:.4g}")
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    result = bench_scaling(_out_dir(args), seed=args.seed or 0)
    print(f"bench-scaling: log-log time exponent {result['time_exponent']:.3f}")
    for row in result["rows"]:
        print(f"  T={row['T']:>3} dual={row['dual_update_ms']:.3f}ms "
              f"machine={row['machine_opt_ms']:.3f}ms "
              f"entries={row['peak_model_entries']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="areaopt",
        description="Estimate interactive human behavior by maximum causal "
                    "entropy and optimize entropy-regularized machine policies.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", type=Path, default=None,
                        help="experiment configuration JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's master seed")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory (default: ./out)")
    parser.add_argument("--threads", type=int, default=1,
                        help="concurrent replicate runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit the human model once")
    p.add_argument("--policy", type=Path, help="machine policy JSON")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("optimize", help="optimal policy for a human model")
    p.add_argument("--human", type=Path, help="human model JSON")
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("area", help="run the alternating loop")
    p.set_defaults(fn=cmd_area)

    p = sub.add_parser("simulate", help="sample accumulator-human interactions")
    p.add_argument("--policy", type=Path, help="machine policy JSON")
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("qlearn", help="run the Q-learning baseline")
    p.set_defaults(fn=cmd_qlearn)

    p = sub.add_parser("reproduce-convergence",
                       help="monitor value vs. moment sample size")
    p.set_defaults(fn=cmd_reproduce_convergence)

    p = sub.add_parser("reproduce-comparison",
                       help="reward and entropy vs. Q-learning")
    p.set_defaults(fn=cmd_reproduce_comparison)

    p = sub.add_parser("bench-scaling", help="update timings vs. horizon")
    p.set_defaults(fn=cmd_bench_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
