"""Experiment harness: strategy runs over parameter sweeps, head-to-head
comparison, and estimator evaluation, with CSV outputs."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import (BudgetExceeded, StrategyResult, brute_force_optimum, model_order,
                        one_switch, static_learn)
from .dynamics import TruthParams, load_truth, true_change_delta, true_run_delta
from .estimators import (BiasedEstimator, CurveFitEstimator, Estimator, EstimatorMetrics,
                         LossHistory, OracleEstimator, estimator_metrics, forecast_change,
                         forecast_run, load_prediction_table)
from .planner import Outcome, PlannerConfig, Trajectory, run_episode, write_trajectory_csv
from .scenario import INFEASIBLE, Scenario, load_scenario

DEFAULT_LOSS_TARGETS = (0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45)


class Strategy(str, enum.Enum):
    PACT = "PACT"
    OPTIMUM = "OPTIMUM"
    STATIC_LEARN = "STATIC_LEARN"
    ONE_SWITCH = "ONE_SWITCH"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        key = text.strip().upper().replace("-", "_")
        aliases = {"STATICLEARN": "STATIC_LEARN", "ONESWITCH": "ONE_SWITCH", "OPT": "OPTIMUM"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown strategy {text!r}; choose from "
                             f"{', '.join(s.value for s in cls)}") from None


class SweepParam(str, enum.Enum):
    LOSS_TARGET = "LOSS_TARGET"
    GAMMA_LOSS = "GAMMA_LOSS"
    BIAS = "BIAS"


@dataclass(frozen=True)
class Sweep:
    param: SweepParam
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("sweep needs at least one value")

    @classmethod
    def parse(cls, text: str) -> "Sweep":
        """``loss_target=0.1,0.2`` (also ``gamma_loss=...`` or ``bias=...``)."""
        name, sep, values = text.partition("=")
        if not sep:
            raise ValueError(f"sweep {text!r} must look like param=v1,v2,...")
        key = name.strip().upper().replace("-", "_")
        key = {"ELL_MAX": "LOSS_TARGET", "LMAX": "LOSS_TARGET"}.get(key, key)
        try:
            param = SweepParam(key)
        except ValueError:
            raise ValueError(f"unknown sweep parameter {name!r}") from None
        try:
            vals = tuple(float(v) for v in values.split(",") if v.strip())
        except ValueError:
            raise ValueError(f"sweep values must be numbers: {values!r}") from None
        return cls(param, vals)


@dataclass(frozen=True)
class Bias:
    target_model: str
    offset: float

    @classmethod
    def parse(cls, text: str) -> "Bias":
        model, sep, offset = text.rpartition(":")
        if not sep or not model:
            raise ValueError(f"bias {text!r} must look like model:offset")
        return cls(model, float(offset))


@dataclass(frozen=True)
class EstimatorConfig:
    """Which predictor the planner consults.

    kind: ``oracle`` (read from the truth), ``curve-fit`` or ``table``.
    """

    kind: str = "oracle"
    band: float = 0.0
    noise_z: float | None = None
    table_path: str | None = None

    def build(self, truth: TruthParams) -> Estimator:
        if self.kind == "oracle":
            return OracleEstimator(truth, band=self.band, noise_z=self.noise_z)
        if self.kind == "curve-fit":
            return CurveFitEstimator(truth.run_family, prior=truth.run_params,
                                     change_penalty=truth.change_penalty,
                                     min_band=self.band, change_band=self.band)
        if self.kind == "table":
            if not self.table_path:
                raise ValueError("table estimator needs a prediction file")
            return load_prediction_table(self.table_path)
        raise ValueError(f"unknown estimator kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    scenario_path: str
    output_dir: str
    strategy: Strategy = Strategy.PACT
    sweep: Sweep | None = None
    bias: Bias | None = None
    seeds: tuple[int, ...] = (0,)
    truth_path: str | None = None
    budget: int = 10**7
    gamma_loss: float | None = None
    gamma_time: float | None = None
    max_epochs: int = 200
    planner: PlannerConfig = PlannerConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    margin: float = 0.05
    plots: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")


@dataclass(frozen=True)
class RunSummary:
    strategy: str
    sweep_param: str
    sweep_value: float | None
    seed: int
    total_energy: float
    total_time: float
    epochs: int
    outcome: Outcome
    energy_by_model: dict[str, float] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.outcome is Outcome.TARGET_REACHED


@dataclass
class RunReport:
    summaries: list[RunSummary]
    trajectories: list[tuple[RunSummary, Trajectory]]
    files: list[str]
    errors: list[str]

    @property
    def exit_code(self) -> int:
        if self.errors:
            return 2
        if self.summaries and not any(s.feasible for s in self.summaries):
            return 3
        return 0


# ---------------------------------------------------------------------------
# helpers

def derive_seed(seed: int, index: int) -> int:
    """Independent stream per (root seed, sweep index)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return int(ss.generate_state(1)[0])


def default_truth_path(scenario_path: str | Path) -> Path:
    p = Path(scenario_path)
    return p.with_name(p.stem + ".truth.json")


def load_inputs(scenario_path: str | Path, truth_path: str | Path | None = None,
                gamma_loss: float | None = None,
                gamma_time: float | None = None) -> tuple[Scenario, TruthParams]:
    scenario = load_scenario(Path(scenario_path))
    if gamma_loss is not None or gamma_time is not None:
        scenario = scenario.with_overrides(gamma_loss=gamma_loss, gamma_time=gamma_time)
    tp = Path(truth_path) if truth_path else default_truth_path(scenario_path)
    if not tp.exists():
        raise FileNotFoundError(f"truth parameters not found at {tp} (pass --truth)")
    return scenario, load_truth(tp)


def run_strategy(strategy: Strategy, scenario: Scenario, truth: TruthParams,
                 estimator: Estimator | None = None, planner: PlannerConfig = PlannerConfig(),
                 budget: int = 10**7, max_epochs: int = 200, margin: float = 0.05) -> StrategyResult:
    if strategy is Strategy.PACT:
        if estimator is None:
            estimator = OracleEstimator(truth)
        cfg = planner if planner.max_epochs is not None else replace(planner, max_epochs=max_epochs)
        return StrategyResult("PACT", run_episode(scenario, estimator, truth, cfg))
    if strategy is Strategy.OPTIMUM:
        return brute_force_optimum(scenario, truth, max_epochs=max_epochs, budget=budget)
    if strategy is Strategy.STATIC_LEARN:
        return static_learn(scenario, truth, margin=margin, max_epochs=max_epochs)
    return one_switch(scenario, truth, max_epochs=max_epochs)


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _value_tag(x: float | None) -> str:
    return "base" if x is None else format(x, "g")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# run

def run_experiment(spec: ExperimentSpec) -> RunReport:
    """Run one strategy over every (sweep value, seed) and write
    per-run trajectories, ``summary.csv``, ``curves.csv`` and ``manifest.json``."""
    scenario, truth = load_inputs(spec.scenario_path, spec.truth_path, spec.gamma_loss,
                                  spec.gamma_time)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    bias_model = spec.bias.target_model if spec.bias else model_order(scenario)[0]
    if bias_model not in scenario.model_ids:
        raise ValueError(f"bias targets unknown model {bias_model!r}")
    values: Sequence[float | None] = spec.sweep.values if spec.sweep else (None,)
    param = spec.sweep.param.value if spec.sweep else ""

    report = RunReport([], [], [], [])
    for i, value in enumerate(values):
        sc = scenario
        offset = spec.bias.offset if spec.bias else 0.0
        if spec.sweep is not None:
            if spec.sweep.param is SweepParam.LOSS_TARGET:
                sc = scenario.with_overrides(loss_target=value)
            elif spec.sweep.param is SweepParam.GAMMA_LOSS:
                sc = scenario.with_overrides(gamma_loss=value)
            else:
                offset = value
        for seed in spec.seeds:
            tag = f"{spec.strategy.value}_{param.lower() or 'run'}-{_value_tag(value)}_seed-{seed}"
            try:
                tr = truth.with_seed(derive_seed(seed, i))
                est = spec.estimator.build(tr)
                if offset:
                    est = BiasedEstimator(est, bias_model, offset)
                result = run_strategy(spec.strategy, sc, tr, est, spec.planner, spec.budget,
                                      spec.max_epochs, spec.margin)
            except Exception as exc:  # reported in the manifest, run continues
                report.errors.append(f"{tag}: {type(exc).__name__}: {exc}")
                continue
            traj = result.trajectory
            path = out / f"trajectory_{tag}.csv"
            write_trajectory_csv(traj, path)
            report.files.append(path.name)
            s = RunSummary(spec.strategy.value, param, value, seed, traj.total_energy,
                           traj.total_time, traj.epochs, traj.outcome, traj.energy_by_model())
            report.summaries.append(s)
            report.trajectories.append((s, traj))

    models = scenario.model_ids
    _atomic_write(out / "summary.csv", summary_csv(report.summaries, models))
    _atomic_write(out / "curves.csv", curves_csv(report.summaries))
    report.files += ["summary.csv", "curves.csv"]
    if spec.plots:
        from . import plotting
        report.files += plotting.render_run_figures(report, out)
    manifest = {
        "complete": not report.errors,
        "strategy": spec.strategy.value,
        "sweep": {"param": param, "values": list(spec.sweep.values)} if spec.sweep else None,
        "seeds": list(spec.seeds),
        "files": report.files,
        "errors": report.errors,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return report


SUMMARY_FIELDS = ["strategy", "sweep_param", "sweep_value", "seed", "total_energy", "total_time",
                  "epochs", "outcome"]


def summary_csv(rows: Iterable[RunSummary], models: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS + [f"energy_{m}" for m in models])
    for s in rows:
        w.writerow([s.strategy, s.sweep_param, _fmt(s.sweep_value), s.seed, _fmt(s.total_energy),
                    _fmt(s.total_time), s.epochs, s.outcome.value]
                   + [_fmt(s.energy_by_model.get(m, 0.0)) for m in models])
    return buf.getvalue()


def read_summary_csv(source: str | Path) -> list[RunSummary]:
    text = Path(source).read_text() if "\n" not in str(source) else str(source)
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        energies = {k[len("energy_"):]: float(v) for k, v in row.items() if k.startswith("energy_")}
        out.append(RunSummary(row["strategy"], row["sweep_param"],
                              float(row["sweep_value"]) if row["sweep_value"] else None,
                              int(row["seed"]), float(row["total_energy"]), float(row["total_time"]),
                              int(row["epochs"]), Outcome(row["outcome"]), energies))
    return out


CURVE_FIELDS = ["sweep_value", "strategy", "runs", "feasible_runs", "energy_mean", "energy_min",
                "energy_max"]


def curves_csv(rows: Iterable[RunSummary]) -> str:
    """Energy statistics per (sweep value, strategy) over feasible runs."""
    groups: dict[tuple, list[RunSummary]] = {}
    for s in rows:
        groups.setdefault((s.sweep_value, s.strategy), []).append(s)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for (value, strategy), group in groups.items():
        e = [s.total_energy for s in group if s.feasible]
        stats = [_fmt(float(np.mean(e))), _fmt(min(e)), _fmt(max(e))] if e else ["", "", ""]
        w.writerow([_fmt(value), strategy, len(group), len(e)] + stats)
    return buf.getvalue()


def read_curves_csv(source: str | Path) -> list[dict]:
    text = Path(source).read_text() if "\n" not in str(source) else str(source)
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({
            "sweep_value": float(row["sweep_value"]) if row["sweep_value"] else None,
            "strategy": row["strategy"],
            "runs": int(row["runs"]),
            "feasible_runs": int(row["feasible_runs"]),
            **{k: float(row[k]) if row[k] else None
               for k in ("energy_mean", "energy_min", "energy_max")},
        })
    return out


# ---------------------------------------------------------------------------
# compare

@dataclass(frozen=True)
class CompareRow:
    loss_target: float
    strategy: str
    energy: float
    time: float
    epochs: int
    outcome: Outcome | None
    note: str = ""

    @property
    def feasible(self) -> bool:
        return self.outcome is Outcome.TARGET_REACHED


@dataclass(frozen=True)
class OrderingCheck:
    loss_target: float
    relation: str
    holds: bool
    note: str = ""


@dataclass
class CompareReport:
    rows: list[CompareRow]
    checks: list[OrderingCheck]

    def energy(self, loss_target: float, strategy: str) -> float:
        for r in self.rows:
            if r.loss_target == loss_target and r.strategy == strategy:
                return r.energy if r.feasible else math.inf
        raise KeyError((loss_target, strategy))

    @property
    def ordering_holds(self) -> bool:
        return all(c.holds for c in self.checks)

    @property
    def exit_code(self) -> int:
        if self.rows and not any(r.feasible for r in self.rows):
            return 3
        return 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss_target", "strategy", "energy", "time", "epochs", "outcome", "note"])
        for r in self.rows:
            w.writerow([_fmt(r.loss_target), r.strategy, _fmt(r.energy), _fmt(r.time), r.epochs,
                        r.outcome.value if r.outcome else "", r.note])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            status = "ok" if c.holds else "VIOLATED"
            extra = f" ({c.note})" if c.note else ""
            lines.append(f"loss_target={c.loss_target:g}: {c.relation}: {status}{extra}")
        return "\n".join(lines) + "\n"


def compare(scenario: Scenario, truth: TruthParams, loss_targets: Sequence[float] = DEFAULT_LOSS_TARGETS,
            estimator: Estimator | None = None, planner: PlannerConfig = PlannerConfig(),
            budget: int = 10**7, max_epochs: int = 200, margin: float = 0.05) -> CompareReport:
    """All four strategies per loss target plus the ordering report
    OPTIMUM <= PACT <= {STATIC_LEARN, ONE_SWITCH}."""
    rows, checks = [], []
    for lt in loss_targets:
        sc = scenario.with_overrides(loss_target=lt)
        energies: dict[str, float] = {}
        for strategy in Strategy:
            note = ""
            try:
                res = run_strategy(strategy, sc, truth, estimator, planner, budget, max_epochs, margin)
            except BudgetExceeded as exc:
                rows.append(CompareRow(lt, strategy.value, exc.best_energy, math.nan, 0, None,
                                       f"budget exceeded after {exc.expanded} expansions"))
                continue
            t = res.trajectory
            rows.append(CompareRow(lt, strategy.value, t.total_energy, t.total_time, t.epochs,
                                   t.outcome, note))
            energies[strategy.value] = t.total_energy if res.feasible else math.inf
        pact = energies.get("PACT", math.inf)
        if "OPTIMUM" in energies:
            checks.append(OrderingCheck(lt, "OPTIMUM <= PACT",
                                        energies["OPTIMUM"] <= pact + 1e-9))
        else:
            checks.append(OrderingCheck(lt, "OPTIMUM <= PACT", True,
                                        "optimum not computed within budget; not checked"))
        for other in ("STATIC_LEARN", "ONE_SWITCH"):
            checks.append(OrderingCheck(lt, f"PACT <= {other}", pact <= energies[other] + 1e-9))
    return CompareReport(rows, checks)


# ---------------------------------------------------------------------------
# estimator evaluation

@dataclass(frozen=True)
class MetricSummary:
    quantity: str
    mae_mean: float
    mae_std: float
    mil_mean: float
    mil_std: float
    icp_mean: float
    icp_std: float
    trajectories: int


def _summarise(quantity: str, per_traj: list[EstimatorMetrics]) -> MetricSummary:
    arr = np.array([[m.mae, m.mil, m.icp] for m in per_traj])
    mean, std = arr.mean(axis=0), arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(3)
    return MetricSummary(quantity, float(mean[0]), float(std[0]), float(mean[1]), float(std[1]),
                         float(mean[2]), float(std[2]), len(per_traj))


def estimator_eval(scenario: Scenario, truth: TruthParams,
                   make_estimator: Callable[[TruthParams], Estimator],
                   num_trajectories: int = 10, horizon: int = 5, epochs: int = 30,
                   seed: int = 0) -> list[MetricSummary]:
    """MAE/MIL/ICP of run and change forecasts, mean and std over trajectories.

    Trajectory ``i`` trains every runnable (model, nodes) pair from epoch 0
    under its own noise stream; at each epoch the estimator forecasts the
    next ``horizon`` deltas from the history so far. Change forecasts are
    compared with the penalty of every model switch the cost tables allow.
    """
    if num_trajectories < 1:
        raise ValueError("num_trajectories must be >= 1")
    switches = sorted({(m, m2) for (m, _, m2, _), c in scenario.costs.change.items()
                       if m != m2 and c.time is not INFEASIBLE and c.energy is not INFEASIBLE})
    run_metrics, change_metrics = [], []
    for i in range(num_trajectories):
        tr = truth.with_seed(derive_seed(seed, i))
        est = make_estimator(tr)
        preds, real = [], []
        for m, n in scenario.runnable_pairs():
            deltas = [true_run_delta(tr, k, m, n) for k in range(epochs + horizon)]
            hist = LossHistory.start(scenario.constraints.initial_loss, (m, n))
            loss = scenario.constraints.initial_loss
            for k in range(epochs):
                preds.append(forecast_run(est, hist, scenario.node_set(n), scenario.model(m), horizon))
                real.append(deltas[k:k + horizon])
                loss = max(0.0, loss + deltas[k])
                hist.append(k + 1, loss, (m, n))
        run_metrics.append(estimator_metrics(preds, real))
        if switches:
            hist = LossHistory.start(scenario.constraints.initial_loss, scenario.start)
            cp = [forecast_change(est, hist, scenario.model(a), scenario.model(b)) for a, b in switches]
            cr = [true_change_delta(tr, a, b) for a, b in switches]
            change_metrics.append(estimator_metrics(cp, cr))
    out = [_summarise("run", run_metrics)]
    if change_metrics:
        out.append(_summarise("change", change_metrics))
    return out


METRIC_FIELDS = ["estimator", "quantity", "mae_mean", "mae_std", "mil_mean", "mil_std",
                 "icp_mean", "icp_std", "trajectories"]


def metrics_csv(estimator_name: str, rows: Iterable[MetricSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([estimator_name, r.quantity, _fmt(r.mae_mean), _fmt(r.mae_std), _fmt(r.mil_mean),
                    _fmt(r.mil_std), _fmt(r.icp_mean), _fmt(r.icp_std), r.trajectories])
    return buf.getvalue()


def read_metrics_csv(source: str | Path) -> list[tuple[str, MetricSummary]]:
    text = Path(source).read_text() if "\n" not in str(source) else str(source)
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append((row["estimator"], MetricSummary(
            row["quantity"], *(float(row[k]) for k in METRIC_FIELDS[2:8]), int(row["trajectories"]))))
    return out
