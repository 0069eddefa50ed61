"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 runtime error, 3 only infeasible
results.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dynamics import load_truth
from .estimators import Z_90, LossHistory
from .graph import build_graph, dump_adjacency, export_dot, predict, vertex_count_formula
from .harness import (DEFAULT_LOSS_TARGETS, Bias, EstimatorConfig, ExperimentSpec, Strategy, Sweep,
                      compare, default_truth_path, estimator_eval, load_inputs, metrics_csv,
                      run_experiment)
from .planner import PlannerConfig
from .scenario import ScenarioError, load_scenario, reference_scenario_path

log = logging.getLogger("pact")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 1, 2, 3
FULL_GRID_LIMIT = 2_000_000


class InputError(Exception):
    """Bad arguments or input files."""


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _horizon(text: str) -> int | None:
    if text.lower() in ("full", "none"):
        return None
    return int(text)


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default=str(reference_scenario_path()),
                   help="scenario JSON (default: bundled reference scenario)")
    p.add_argument("--truth", help="truth-parameter JSON (default: <scenario stem>.truth.json)")
    p.add_argument("--gamma-loss", type=float, help="override the loss resolution")
    p.add_argument("--gamma-time", type=float, help="override the time resolution")


def _add_planner(p: argparse.ArgumentParser) -> None:
    p.add_argument("--horizon", type=_horizon, default=5,
                   help="forecast horizon in epochs, or 'full' for the whole lookahead")
    p.add_argument("--max-depth", type=int, default=100, help="graph lookahead in epochs")
    p.add_argument("--estimator", choices=["oracle", "curve-fit", "table"], default="oracle")
    p.add_argument("--band", type=float, default=0.0, help="absolute forecast half-width")
    p.add_argument("--predictions", help="prediction-table CSV for --estimator table")


def _planner(args) -> PlannerConfig:
    return PlannerConfig(horizon=args.horizon, max_depth=args.max_depth)


def _estimator(args) -> EstimatorConfig:
    if args.estimator == "table" and not args.predictions:
        raise InputError("--estimator table needs --predictions")
    return EstimatorConfig(args.estimator, band=args.band, table_path=args.predictions)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pact", description="Energy-aware training planner")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one strategy over a sweep and seeds")
    _add_inputs(p)
    _add_planner(p)
    p.add_argument("--strategy", default="PACT")
    p.add_argument("--sweep", help="param=v1,v2,... with param in loss_target, gamma_loss, bias")
    p.add_argument("--bias", help="model:offset added to that model's run forecasts")
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--budget", type=int, default=10**7, help="max enumerations for OPTIMUM")
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--plots", action="store_true", help="also render PNG figures")

    p = sub.add_parser("compare", help="all strategies per loss target with ordering report")
    _add_inputs(p)
    _add_planner(p)
    p.add_argument("--loss-targets", type=_floats, default=list(DEFAULT_LOSS_TARGETS))
    p.add_argument("--budget", type=int, default=10**7)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--out", help="directory for compare.csv and the ordering report")

    p = sub.add_parser("graph-dump", help="write the epoch-0 expanded graph as DOT")
    _add_inputs(p)
    _add_planner(p)
    p.set_defaults(max_depth=20)
    p.add_argument("--out", required=True, help="DOT output path")
    p.add_argument("--adjacency", help="also write a gzip adjacency listing here")
    p.add_argument("--full-grid", action="store_true", help="materialise the whole lattice")

    p = sub.add_parser("estimator-eval", help="MAE/MIL/ICP of an estimator over trajectories")
    _add_inputs(p)
    p.add_argument("--estimator", choices=["oracle", "curve-fit"], default="oracle")
    p.add_argument("--band", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, help="override the truth noise level")
    p.add_argument("--quantile-band", action="store_true",
                   help="oracle band at the true 0.05/0.95 noise quantiles")
    p.add_argument("--trajectories", type=int, default=10)
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--out", help="CSV output path (default: stdout)")

    p = sub.add_parser("validate", help="check a scenario (and its truth file)")
    p.add_argument("--scenario", default=str(reference_scenario_path()))
    p.add_argument("--truth")
    return parser


# ---------------------------------------------------------------------------
# commands

def cmd_run(args) -> int:
    try:
        spec = ExperimentSpec(
            scenario_path=args.scenario, output_dir=args.out, strategy=Strategy.parse(args.strategy),
            sweep=Sweep.parse(args.sweep) if args.sweep else None,
            bias=Bias.parse(args.bias) if args.bias else None,
            seeds=tuple(args.seeds), truth_path=args.truth, budget=args.budget,
            gamma_loss=args.gamma_loss, gamma_time=args.gamma_time, max_epochs=args.max_epochs,
            planner=_planner(args), estimator=_estimator(args), plots=args.plots)
        load_inputs(spec.scenario_path, spec.truth_path, spec.gamma_loss, spec.gamma_time)
    except (ValueError, FileNotFoundError) as exc:
        raise InputError(str(exc)) from exc
    report = run_experiment(spec)
    for err in report.errors:
        log.error(err)
    for s in report.summaries:
        value = "" if s.sweep_value is None else f" {s.sweep_param.lower()}={s.sweep_value:g}"
        print(f"{s.strategy}{value} seed={s.seed}: {s.outcome.value} "
              f"energy={s.total_energy:.4g} time={s.total_time:.4g} epochs={s.epochs}")
    print(f"wrote {len(report.files)} files to {args.out}")
    return report.exit_code


def cmd_compare(args) -> int:
    try:
        scenario, truth = load_inputs(args.scenario, args.truth, args.gamma_loss, args.gamma_time)
        est = _estimator(args).build(truth)
    except (ValueError, FileNotFoundError) as exc:
        raise InputError(str(exc)) from exc
    report = compare(scenario, truth, args.loss_targets, est, _planner(args), args.budget,
                     args.max_epochs)
    print(report.to_csv(), end="")
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(report.to_csv())
        (out / "ordering.txt").write_text(report.to_text())
    return report.exit_code


def cmd_graph_dump(args) -> int:
    try:
        scenario, truth = load_inputs(args.scenario, args.truth, args.gamma_loss, args.gamma_time)
        est = _estimator(args).build(truth)
    except (ValueError, FileNotFoundError) as exc:
        raise InputError(str(exc)) from exc
    if args.full_grid:
        c, q = scenario.constraints, scenario.quantization
        size = vertex_count_formula(len(scenario.models), len(scenario.node_sets), c.time_limit,
                                    q.gamma_time, c.initial_loss, q.gamma_loss)
        if size > FULL_GRID_LIMIT:
            raise InputError(f"full grid would hold {size} vertices (limit {FULL_GRID_LIMIT}); "
                             "coarsen --gamma-loss/--gamma-time")
    state = scenario.initial_state()
    horizon = args.horizon if args.horizon is not None else args.max_depth + 1
    preds = predict(scenario, est, LossHistory.start(state.loss, scenario.start), horizon)
    graph = build_graph(scenario, preds, state, full_grid=args.full_grid,
                        max_depth=None if args.full_grid else args.max_depth,
                        carry_loss=False)
    Path(args.out).write_text(export_dot(graph, reachable_only=True))
    if args.adjacency:
        dump_adjacency(graph, args.adjacency)
    reach = graph.reachable_from()
    feasible = sum(1 for v in graph.feasible if v in reach)
    print(f"{len(reach)} reachable vertices, {feasible} linked to the sink; wrote {args.out}")
    return EXIT_OK


def cmd_estimator_eval(args) -> int:
    try:
        scenario, truth = load_inputs(args.scenario, args.truth, args.gamma_loss, args.gamma_time)
    except (ValueError, FileNotFoundError) as exc:
        raise InputError(str(exc)) from exc
    if args.noise_sigma is not None:
        truth = truth.with_noise(args.noise_sigma, truth.noise_clip)
    cfg = EstimatorConfig(args.estimator, band=args.band,
                          noise_z=Z_90 if args.quantile_band else None)
    rows = estimator_eval(scenario, truth, cfg.build, args.trajectories, args.horizon, args.epochs,
                          seed=args.seeds[0])
    text = metrics_csv(args.estimator, rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        scenario = load_scenario(Path(args.scenario))
        truth_path = Path(args.truth) if args.truth else default_truth_path(args.scenario)
        truth = None
        if args.truth or truth_path.exists():
            truth = load_truth(truth_path)
            missing = [p for p in scenario.runnable_pairs() if p not in truth.run_params]
            if missing:
                raise InputError(f"{truth_path}: no run parameters for {missing}")
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(str(exc)) from exc
    c = scenario.constraints
    print(f"ok: {len(scenario.models)} models, {len(scenario.node_sets)} node sets, "
          f"{len(scenario.runnable_pairs())} runnable pairs, loss target {c.loss_target:g}, "
          f"time limit {c.time_limit:g}" + (", truth ok" if truth else ""))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "graph-dump": cmd_graph_dump,
    "estimator-eval": cmd_estimator_eval,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        if args.verbose:
            log.exception("runtime error")
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
