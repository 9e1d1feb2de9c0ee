#!/usr/bin/env python3
"""
Command-line harness for the extrapolated conditional-gradient solvers.
Generates IMRT instances, solves built-in or stored problems, sweeps Φ or the
iteration count, and fits convergence slopes from traces.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from baseline_conex import DimensionCapExceeded, DEFAULT_DIMENSION_CAP, run_conex
from benchmarks import BUILTIN_PROBLEMS, builtin_problem, reference_solution
from imrt import PlanPoint, build_problem, count_selected_angles, evaluate_dvh_criteria, plan_to_dict
from imrt_instance import GeneratorConfig, ImrtInstance, InstanceError, generate_instance, load_instance, save_instance
from problem_model import ProblemError, ProblemSpec
from reports import (
    dvh_rows,
    export_sweep_workbook,
    fit_loglog_slope,
    read_trace_file,
    trace_metric,
    write_dvh_csv,
    write_plan_json,
    write_summary_json,
    write_sweep_csv,
    write_trace_csv,
)
from solver_coexcg import SolverAbort, SolverResult, load_checkpoint, run_classic_fw, run_coexcg, save_checkpoint
from solver_coexdurcg import run_adaptive_nonsmooth, run_coexdurcg


logger = logging.getLogger(__name__)

SOLVERS = ("coexcg", "coexdurcg", "adaptive", "conex", "classic-fw")
EMIT_CHOICES = ("trace", "dvh", "plan", "summary")
SWEEP_KINDS = ("phi", "iters")
RATE_METRICS = ("infeasibility", "objective")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_REFUSED = 4


@dataclass
class RunConfig:
    """One run: a subcommand, one instance source, one solver and its outputs."""
    command: str = "solve"
    seed: int = 0
    problem: Optional[str] = None
    instance: Optional[str] = None
    solver: str = "coexcg"
    iters: int = 100
    target_infeasibility: Optional[float] = None
    phi: Optional[float] = None
    hinge_c: float = 0.6
    overrides: Dict[str, float] = field(default_factory=dict)
    out_dir: str = "."
    emit: Tuple[str, ...] = ("trace", "summary")
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    dimension_cap: int = DEFAULT_DIMENSION_CAP
    generator: Dict[str, Any] = field(default_factory=dict)
    sweep: str = "phi"
    values: List[float] = field(default_factory=list)
    traces: List[str] = field(default_factory=list)
    metric: str = "infeasibility"
    f_star: Optional[float] = None
    verbose: bool = False

    def validate(self) -> None:
        if self.solver not in SOLVERS:
            raise ProblemError(f"Unknown solver '{self.solver}', expected one of {', '.join(SOLVERS)}")
        if self.problem is not None and self.instance is not None:
            raise ProblemError("Give either --problem or --instance, not both")
        if self.problem is not None and self.problem not in BUILTIN_PROBLEMS:
            raise ProblemError(f"Unknown problem '{self.problem}', expected one of {', '.join(BUILTIN_PROBLEMS)}")
        unknown = set(self.emit) - set(EMIT_CHOICES)
        if unknown:
            raise ProblemError(f"Unknown --emit value(s) {sorted(unknown)}; allowed: {', '.join(EMIT_CHOICES)}")
        if self.iters < 1:
            raise ProblemError(f"--iters must be at least 1, got {self.iters}")
        if self.sweep not in SWEEP_KINDS:
            raise ProblemError(f"Unknown sweep '{self.sweep}', expected one of {', '.join(SWEEP_KINDS)}")
        if self.metric not in RATE_METRICS:
            raise ProblemError(f"Unknown metric '{self.metric}', expected one of {', '.join(RATE_METRICS)}")
        if self.resume and self.solver not in ("coexdurcg", "adaptive"):
            raise ProblemError("--resume needs an anytime solver (coexdurcg or adaptive)")


def parse_overrides(items: List[str]) -> Dict[str, float]:
    """KEY=VAL strings -> {KEY: float(VAL)}."""
    overrides = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ProblemError(f"--override-const expects KEY=VAL, got '{item}'")
        try:
            overrides[key.strip()] = float(value)
        except ValueError:
            raise ProblemError(f"--override-const {key}: '{value}' is not a number")
    return overrides


def load_config_file(path: Path) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ProblemError(f"Config file {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ProblemError(f"Unknown config key(s) in {path}: {sorted(unknown)}")
    return doc


GENERATOR_FLAGS = {"l": "l", "delta": "delta", "angles": "n_angles", "angle_step": "angle_step",
                   "rows": "rows", "cols": "cols", "beamlets": "beamlets_per_angle", "dose_rate": "dose_rate"}


def build_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge the --config file (if any) with explicit flags; flags win.

    Returns:
        Validated RunConfig
    """
    values: Dict[str, Any] = {}
    if getattr(args, "config", None):
        values.update(load_config_file(Path(args.config)))
    values["command"] = args.command

    explicit = {key: value for key, value in vars(args).items() if value is not None}
    generator = dict(values.get("generator", {}))
    for flag, name in GENERATOR_FLAGS.items():
        if flag in explicit:
            generator[name] = explicit.pop(flag)
    if "dose_rate" in generator and generator["dose_rate"] != "auto":
        generator["dose_rate"] = float(generator["dose_rate"])
    values["generator"] = generator

    if "override_const" in explicit:
        values["overrides"] = {**values.get("overrides", {}), **parse_overrides(explicit.pop("override_const"))}
    emit = explicit.pop("emit", values.get("emit"))
    if isinstance(emit, str):
        emit = emit.split(",")
    if emit is not None:
        values["emit"] = tuple(part.strip() for part in emit if part.strip())

    known = {f.name for f in fields(RunConfig)}
    values.update({key: value for key, value in explicit.items() if key in known and key != "command"})
    config = RunConfig(**values)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Problem loading and solving
# ---------------------------------------------------------------------------

def generator_config(config: RunConfig) -> GeneratorConfig:
    params = dict(config.generator)
    if config.phi is not None:
        params["phi"] = config.phi
    return GeneratorConfig.from_dict({**params, "seed": config.seed})


def load_problem_for(config: RunConfig) -> Tuple[ProblemSpec, Optional[ImrtInstance]]:
    """The run's problem: a stored instance, a built-in problem, or a generated IMRT instance."""
    if config.instance is not None:
        instance = load_instance(Path(config.instance))
        spec = build_problem(instance, phi=config.phi)
    elif config.problem in (None, "imrt"):
        instance = generate_instance(generator_config(config))
        spec = build_problem(instance)
    else:
        spec, instance = builtin_problem(config.problem, config.seed, c=config.hinge_c)
    return spec.with_overrides(config.overrides), instance


def run_solver(spec: ProblemSpec, config: RunConfig, iters: Optional[int] = None) -> Tuple[SolverResult, str]:
    """
    Run the configured solver.

    CoexDurCG on a problem with nonsmooth parts runs its adaptive-smoothing variant.

    Returns:
        Tuple of (result, name of the solver that ran)
    """
    N = iters or config.iters
    solver = config.solver
    if solver == "coexcg":
        return run_coexcg(spec, N), solver
    if solver == "classic-fw":
        return run_classic_fw(spec, N), solver
    if solver == "conex":
        return run_conex(spec, N, dimension_cap=config.dimension_cap), solver

    if solver == "coexdurcg" and not spec.is_smooth:
        logger.info("Nonsmooth parts present: running the adaptive-smoothing variant")
        solver = "adaptive"

    state = None
    if config.resume:
        saved_solver, state = load_checkpoint(Path(config.resume), PlanPoint.from_dict)
        if saved_solver != solver:
            raise ProblemError(f"Checkpoint was written by '{saved_solver}', not '{solver}'")
        print(f"Resuming from k={state.k}")

    callback = None
    if config.target_infeasibility is not None:
        target = config.target_infeasibility
        callback = lambda current, record: record.infeasibility <= target

    runner = run_adaptive_nonsmooth if solver == "adaptive" else run_coexdurcg
    return runner(spec, max_iter=N, callback=callback, state=state), solver


def summarize(result: SolverResult, spec: ProblemSpec, solver: str, config: RunConfig,
              instance: Optional[ImrtInstance]) -> Dict[str, Any]:
    summary = result.trace.summary()
    summary.update({
        "problem": spec.name,
        "solver": solver,
        "seed": config.seed,
        "atoms_used": len(result.atoms),
        "constants": {"D_X": spec.constants.D_X, "A_norm": spec.constants.A_norm, "L_f": spec.constants.L_f,
                      "L_bar": spec.constants.L_bar, "M_bar": spec.constants.M_bar},
    })
    if instance is not None and isinstance(result.x, PlanPoint):
        summary["angles_used"] = count_selected_angles(result.x)
        summary["dvh_criteria"] = evaluate_dvh_criteria(result.x, instance)
    return summary


def emit_outputs(result: SolverResult, spec: ProblemSpec, solver: str, config: RunConfig,
                 instance: Optional[ImrtInstance]) -> Dict[str, Any]:
    """Write the requested artifacts to the output directory and return the summary."""
    out_dir = Path(config.out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{spec.name}-{solver}"
    summary = summarize(result, spec, solver, config, instance)

    if "trace" in config.emit and write_trace_csv(result.trace, out_dir / f"{stem}-trace.csv"):
        print(f"Trace: {out_dir / f'{stem}-trace.csv'}")
    if "summary" in config.emit and write_summary_json(summary, out_dir / f"{stem}-summary.json"):
        print(f"Summary: {out_dir / f'{stem}-summary.json'}")
    if isinstance(result.x, PlanPoint) and instance is not None:
        if "plan" in config.emit and write_plan_json(plan_to_dict(result.x, instance), out_dir / f"{stem}-plan.json"):
            print(f"Plan: {out_dir / f'{stem}-plan.json'}")
        if "dvh" in config.emit and write_dvh_csv(dvh_rows(result.x, instance), out_dir / f"{stem}-dvh.csv"):
            print(f"DVH: {out_dir / f'{stem}-dvh.csv'}")
    elif {"plan", "dvh"} & set(config.emit):
        print("Note: plan and DVH exports apply to aperture-based IMRT problems only")
    return summary


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(config: RunConfig) -> int:
    instance = generate_instance(generator_config(config))
    geometry = instance.geometry
    out_dir = Path(config.out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry_path = out_dir / f"instance-seed{config.seed}.json"
    dose_path = geometry_path.with_suffix(".dose")

    print(f"Voxels: {geometry.n_voxels}")
    print(f"Angles: {geometry.n_angles}")
    print(f"Beamlet grid: {geometry.rows} x {geometry.cols} ({geometry.beamlets_per_angle} beamlets per angle)")
    print(f"Apertures per angle: {geometry.apertures_per_angle()}")
    print(f"Apertures in total: {geometry.n_angles * geometry.apertures_per_angle()}")
    print(f"Dose entries: {instance.dose.nnz}")
    print(f"Dose rate R: {instance.dose_rate:.6g}")

    if not save_instance(instance, geometry_path, dose_path):
        return EXIT_CONFIG
    print(f"Geometry: {geometry_path}")
    print(f"Dose: {dose_path}")
    return EXIT_OK


def cmd_solve(config: RunConfig) -> int:
    spec, instance = load_problem_for(config)
    print(f"Problem: {spec.name} (solver {config.solver}, N={config.iters})")
    result, solver = run_solver(spec, config)
    summary = emit_outputs(result, spec, solver, config, instance)

    if config.checkpoint:
        if result.state is None:
            raise ProblemError(f"Solver '{solver}' does not produce a resumable state")
        if save_checkpoint(Path(config.checkpoint), result.state, solver):
            print(f"Checkpoint: {config.checkpoint}")

    print("\n" + "=" * 50)
    print("Solve complete!")
    print(f"Iterations: {summary['iterations']}")
    print(f"Objective f(x_N): {summary['objective']:.6g}")
    print(f"Infeasibility: {summary['infeasibility']:.6g}")
    print(f"Wall seconds: {summary['wall_seconds']:.3f}")
    print(f"Atoms used: {summary['atoms_used']}")
    if "angles_used" in summary:
        print(f"Angles used: {summary['angles_used']}")
        passed = sum(1 for row in summary["dvh_criteria"] if row["passed"])
        print(f"DVH criteria met: {passed}/{len(summary['dvh_criteria'])}")
    print("=" * 50)
    return EXIT_OK


def cmd_sweep(config: RunConfig) -> int:
    if not config.values:
        raise ProblemError("--values is required for a sweep")
    base_spec, instance = load_problem_for(config)
    out_dir = Path(config.out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)

    reference = None
    if config.sweep == "iters" and instance is None:
        reference = reference_solution(base_spec)
        print(f"Reference f*: {reference.f:.10g}")

    rows = []
    for value in config.values:
        spec, iters = base_spec, config.iters
        if config.sweep == "phi":
            if instance is None or config.problem == "dense-imrt":
                raise ProblemError("A Φ sweep needs an aperture-based IMRT problem")
            spec = build_problem(instance, phi=float(value)).with_overrides(config.overrides)
        else:
            iters = int(value)
        result, solver = run_solver(spec, config, iters)
        final = result.trace.final
        row = [value, final.objective, final.infeasibility, len(result.atoms),
               count_selected_angles(result.x) if isinstance(result.x, PlanPoint) else "",
               result.trace.summary()["wall_seconds"]]
        if reference is not None:
            row.append(abs(final.objective - reference.f))
        rows.append(row)
        print(f"{config.sweep}={value}: f={final.objective:.6g} infeasibility={final.infeasibility:.3g}")

    header = [config.sweep, "objective", "infeasibility", "atoms", "angles", "wall_seconds"]
    if reference is not None:
        header.append("objective_gap")
    stem = f"{base_spec.name}-{config.solver}-sweep-{config.sweep}"
    write_sweep_csv(header, rows, out_dir / f"{stem}.csv")
    export_sweep_workbook({f"{config.sweep} sweep": (header, rows)}, out_dir / f"{stem}.xlsx")

    print("\n" + "=" * 50)
    print("Sweep complete!")
    print(f"Runs: {len(rows)}")
    if config.sweep == "iters" and len(rows) >= 2:
        ns = [row[0] for row in rows]
        print(f"Infeasibility slope: {fit_loglog_slope(ns, [row[2] for row in rows]):.4f}")
        if reference is not None:
            print(f"Objective-gap slope: {fit_loglog_slope(ns, [row[-1] for row in rows]):.4f}")
    print(f"Table: {out_dir / f'{stem}.csv'}")
    print("=" * 50)
    return EXIT_OK


def cmd_ratefit(config: RunConfig) -> int:
    if len(config.traces) < 3:
        raise ProblemError("ratefit needs at least three traces at geometrically spaced N")
    ns, metrics = [], []
    for trace_path in config.traces:
        rows = read_trace_file(Path(trace_path))
        if not rows:
            raise ProblemError(f"Trace {trace_path} is empty or unreadable")
        n, metric = trace_metric(rows, config.metric, config.f_star)
        ns.append(n)
        metrics.append(metric)
        print(f"{trace_path}: N={n:g} {config.metric}={metric:.6g}")

    slope = fit_loglog_slope(ns, metrics)
    print("\n" + "=" * 50)
    print(f"Fitted slope of {config.metric}: {slope:.6f}")
    print("=" * 50)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "solve": cmd_solve, "sweep": cmd_sweep, "ratefit": cmd_ratefit}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Conditional-gradient solvers with constraint extrapolation for constrained convex problems.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py generate --seed 1 --out-dir instances
  python main.py solve --instance instances/instance-seed1.json --solver coexcg --iters 1000 --emit trace,dvh,plan,summary
  python main.py solve --problem qp --solver coexdurcg --iters 6400 --override-const M_bar=10
  python main.py sweep --sweep phi --values 1 0.1 0.005 0.0005 --solver coexcg --iters 1000
  python main.py sweep --problem qp --sweep iters --values 100 400 1600 6400
  python main.py ratefit run100.csv run400.csv run1600.csv --metric infeasibility
        """
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=str, default=None, help="JSON file mirroring the flags (flags win)")
        sub.add_argument("--seed", type=int, default=None, help="Random seed of the instance (default: 0)")
        sub.add_argument("--out-dir", type=str, default=None, help="Output directory (default: current directory)")
        sub.add_argument("--verbose", action="store_true", default=None, help="Debug logging")

    def generator_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--l", type=float, default=None, help="Half edge of the body cube (default: 8)")
        sub.add_argument("--delta", type=float, default=None, help="Voxel edge (default: 1)")
        sub.add_argument("--angles", type=int, default=None, help="Number of beam angles (default: 180)")
        sub.add_argument("--angle-step", type=float, default=None, help="Degrees between angles (default: 2)")
        sub.add_argument("--rows", type=int, default=None, help="Collimator rows (default: 2l/delta)")
        sub.add_argument("--cols", type=int, default=None, help="Collimator columns (default: 2l/delta)")
        sub.add_argument("--beamlets", type=int, default=None, help="Beamlets per angle (default: rows*cols)")
        sub.add_argument("--dose-rate", type=str, default=None, help="Dose rate R or 'auto' (default: auto)")
        sub.add_argument("--phi", type=float, default=None, help="Group-sparsity budget Φ (default: 0.2)")

    def solver_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--problem", type=str, default=None, choices=BUILTIN_PROBLEMS,
                         help="Built-in problem when no --instance is given (default: imrt)")
        sub.add_argument("--instance", type=str, default=None, help="Instance geometry JSON (dose file alongside)")
        sub.add_argument("--solver", type=str, default=None, choices=SOLVERS, help="Solver (default: coexcg)")
        sub.add_argument("--iters", type=int, default=None, help="Iterations N (default: 100)")
        sub.add_argument("--override-const", type=str, action="append", default=None,
                         help="Replace a theory constant, KEY=VAL with KEY in D_X, A_norm, L_f, L_bar, M_bar")
        sub.add_argument("--hinge-c", type=float, default=None, help="Target c of the hinge problem (default: 0.6)")
        sub.add_argument("--dimension-cap", type=int, default=None, help="Largest dimension ConEx accepts")

    generate = subparsers.add_parser("generate", help="Generate a synthetic IMRT instance")
    common(generate)
    generator_flags(generate)

    solve = subparsers.add_parser("solve", help="Solve one problem")
    common(solve)
    generator_flags(solve)
    solver_flags(solve)
    solve.add_argument("--emit", type=str, default=None, help="Comma list of trace,dvh,plan,summary")
    solve.add_argument("--target-infeasibility", type=float, default=None,
                       help="Stop anytime solvers once the infeasibility reaches this value")
    solve.add_argument("--checkpoint", type=str, default=None, help="Save the final solver state here")
    solve.add_argument("--resume", type=str, default=None, help="Resume an anytime solver from a checkpoint")

    sweep = subparsers.add_parser("sweep", help="Run a solver over Φ values or iteration counts")
    common(sweep)
    generator_flags(sweep)
    solver_flags(sweep)
    sweep.add_argument("--sweep", type=str, default=None, choices=SWEEP_KINDS, help="Swept quantity (default: phi)")
    sweep.add_argument("--values", type=float, nargs="+", default=None, help="Values of the swept quantity")

    ratefit = subparsers.add_parser("ratefit", help="Fit log-log slopes from traces")
    ratefit.add_argument("traces", type=str, nargs="+", help="Trace files (.csv or .xlsx)")
    ratefit.add_argument("--metric", type=str, default=None, choices=RATE_METRICS,
                         help="Fitted metric (default: infeasibility)")
    ratefit.add_argument("--f-star", type=float, default=None, help="Optimal value for objective-gap fits")
    ratefit.add_argument("--verbose", action="store_true", default=None, help="Debug logging")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the script."""
    args = build_parser().parse_args(argv)
    try:
        config = build_config(args)
    except (ProblemError, InstanceError, OSError, json.JSONDecodeError, TypeError) as e:
        print(f"Error: {str(e)}")
        return EXIT_CONFIG

    logging.basicConfig(level=logging.DEBUG if config.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[config.command](config)
    except DimensionCapExceeded as e:
        print(f"Refused: {str(e)}")
        return EXIT_REFUSED
    except SolverAbort as e:
        print(f"Solver aborted: {str(e)}")
        return EXIT_ABORT
    except (ProblemError, InstanceError, OSError) as e:
        print(f"Error: {str(e)}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
