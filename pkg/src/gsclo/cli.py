"""Command-line front end.

Subcommands:
  gsclo run    --config FILE --out DIR [--seed N] [--workers N]
  gsclo trace  gen|inspect ...
  gsclo solve  --solver ID --trace FILE [--config FILE] [--budget-watt X]

Configs are flat ``key = value`` text ('#' comments allowed); keys mirror the
dataclass fields with SI units spelled out in the names. See the README for
the full schema.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .apo import InfeasibleError
from .core import (
    ScenarioConfig,
    load_trace_csv,
    losses_and_gains,
    save_trace_csv,
)
from .experiments import (
    ExperimentSpec,
    SOLVER_IDS,
    TraceGeneratorParams,
    emit_report,
    generate_trace,
    run_experiment,
    _solve_cell,
)

_SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)}
_GENERATOR_KEYS = {
    "loss_bulk_low": "bulk_low",
    "loss_bulk_high": "bulk_high",
    "loss_tail_fraction": "tail_fraction",
    "loss_tail_max": "tail_max",
}
_BOOL_TRUE = {"true", "yes", "on", "1"}
_BOOL_FALSE = {"false", "no", "off", "0"}


def _parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_config(path: str | Path) -> dict:
    """Read a flat key=value config; comma-separated values become lists."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out


def _as_tuple(value) -> tuple:
    if isinstance(value, list):
        return tuple(value)
    return (value,)


def scenario_from_config(conf: dict, seed: int | None = None) -> ScenarioConfig:
    kwargs = {k: v for k, v in conf.items() if k in _SCENARIO_KEYS}
    if seed is not None:
        kwargs["rng_seed"] = seed
    return ScenarioConfig(**kwargs)


def spec_from_config(conf: dict, seed: int | None = None,
                     workers: int | None = None) -> ExperimentSpec:
    scenario = scenario_from_config(conf, seed)
    gen_kwargs = {dst: conf[src] for src, dst in _GENERATOR_KEYS.items()
                  if src in conf}
    solvers = conf.get("solvers", ["apo", "ranking"])
    return ExperimentSpec(
        scenario=scenario,
        solvers=tuple(str(s) for s in _as_tuple(solvers)),
        power_sweep_watt=tuple(float(p) for p in
                               _as_tuple(conf.get("power_sweep_watt",
                                                  scenario.power_budget_watt))),
        monte_carlo_runs=int(conf.get("monte_carlo_runs", 50)),
        trace_file=conf.get("trace_file"),
        generator=TraceGeneratorParams(**gen_kwargs),
        uncertainty_factor=float(conf.get("uncertainty_factor", 0.0)),
        lth_sweep=tuple(float(v) for v in _as_tuple(conf["lth_sweep"]))
        if "lth_sweep" in conf else (),
        workers=workers if workers is not None else int(conf.get("workers", 1)),
        record_timings=bool(conf.get("record_timings", False)),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_run(args) -> int:
    conf = parse_config(args.config)
    spec = spec_from_config(conf, seed=args.seed, workers=args.workers)
    rows, qoe_rows = run_experiment(spec)
    written = emit_report(rows, args.out, qoe_rows,
                          record_timings=spec.record_timings)
    for path in written:
        print(path)
    return 0


def _cmd_trace_gen(args) -> int:
    conf = parse_config(args.config) if args.config else {}
    scenario = scenario_from_config(conf, seed=args.seed)
    if args.frames is not None:
        scenario = ScenarioConfig(**{**{f.name: getattr(scenario, f.name)
                                        for f in fields(ScenarioConfig)},
                                     "num_frames": args.frames})
    gen_kwargs = {dst: conf[src] for src, dst in _GENERATOR_KEYS.items()
                  if src in conf}
    rng = np.random.default_rng(scenario.rng_seed)
    frames = generate_trace(scenario, TraceGeneratorParams(**gen_kwargs), rng,
                            uncertainty_factor=float(
                                conf.get("uncertainty_factor", 0.0)))
    save_trace_csv(args.out, frames)
    print(args.out)
    return 0


def _cmd_trace_inspect(args) -> int:
    frames = load_trace_csv(args.trace)
    losses, gains = losses_and_gains(frames)
    info = {
        "frames": len(frames),
        "loss": {"min": float(losses.min()), "mean": float(losses.mean()),
                 "max": float(losses.max())},
        "gain": {"min": float(gains.min()), "mean": float(gains.mean()),
                 "max": float(gains.max())},
        "has_estimates": all(f.channel_estimate is not None for f in frames),
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def _cmd_solve(args) -> int:
    conf = parse_config(args.config) if args.config else {}
    scenario = scenario_from_config(conf, seed=args.seed)
    frames = sorted(load_trace_csv(args.trace), key=lambda f: f.frame_index)
    losses, gains = losses_and_gains(frames)
    if all(f.channel_estimate is not None for f in frames):
        estimates = np.array([f.channel_estimate for f in frames], dtype=complex)
        omega2 = np.array([f.uncertainty or 0.0 for f in frames])
    else:
        estimates = np.sqrt(gains).astype(complex)
        omega2 = np.zeros(len(frames))
    cfg_kwargs = {f.name: getattr(scenario, f.name) for f in fields(ScenarioConfig)}
    cfg_kwargs["num_frames"] = len(frames)
    cfg_kwargs["neighborhood_radius"] = min(scenario.neighborhood_radius,
                                            len(frames))
    if args.budget_watt is not None:
        cfg_kwargs["power_budget_watt"] = args.budget_watt
    cfg = ScenarioConfig(**cfg_kwargs)
    try:
        alloc, wall = _solve_cell(args.solver, losses, estimates, omega2, cfg,
                                  scenario.rng_seed)
    except InfeasibleError as exc:
        print(json.dumps({"solver": args.solver, "feasible": False,
                          "error": str(exc)}))
        return 1
    summary = {
        "solver": args.solver,
        "frames": len(frames),
        "uploads": int(alloc.x.sum()),
        "mean_loss": float(np.mean(losses * (1.0 - alloc.x))),
        "mean_power_watt": float(np.mean(alloc.p)),
        "x": [int(v) for v in alloc.x],
        "p_watt": [float(v) for v in alloc.p],
        "wall_time_s": wall,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsclo",
        description="Content-switching / power-allocation experiment runner")
    parser.add_argument("--version", action="version",
                        version=f"gsclo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment sweep")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_trace = sub.add_parser("trace", help="generate or inspect trace files")
    trace_sub = p_trace.add_subparsers(dest="trace_command", required=True)
    p_gen = trace_sub.add_parser("gen", help="sample a synthetic trace")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--config", default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--frames", type=int, default=None)
    p_gen.set_defaults(func=_cmd_trace_gen)
    p_inspect = trace_sub.add_parser("inspect", help="summarise a trace file")
    p_inspect.add_argument("--trace", required=True)
    p_inspect.set_defaults(func=_cmd_trace_inspect)

    p_solve = sub.add_parser("solve", help="solve one trace with one solver")
    p_solve.add_argument("--solver", required=True, choices=SOLVER_IDS)
    p_solve.add_argument("--trace", required=True)
    p_solve.add_argument("--config", default=None)
    p_solve.add_argument("--budget-watt", type=float, default=None)
    p_solve.add_argument("--seed", type=int, default=None)
    p_solve.set_defaults(func=_cmd_solve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, InfeasibleError) as exc:
        print(f"gsclo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
