"""Loss-change estimators with expected values and 0.05/0.95 quantiles.

Three estimator kinds share one interface:

* :class:`OracleEstimator` reads the simulated ground truth, optionally with
  an additive bias and a symmetric band.
* :class:`CurveFitEstimator` fits the decay family to the observed history.
* :class:`TableEstimator` replays predictions exported by an external model.

The 0.95 quantile (``q_high``) is the robust estimate used for feasibility;
``expected`` is the expected-value estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy.optimize import curve_fit

from .dynamics import RunFamily, RunParams, TruthParams, mean_run_delta, true_change_delta
from .scenario import ModelProfile, NodeSetProfile

Z_90 = 1.6448536269514722  # standard-normal 0.95 quantile
_EPS = 1e-12


class EstimatorError(LookupError):
    pass


@dataclass(frozen=True)
class Forecast:
    expected: tuple[float, ...]
    q_low: tuple[float, ...]
    q_high: tuple[float, ...]

    def __post_init__(self):
        n = len(self.expected)
        if n < 1:
            raise ValueError("forecast horizon must be >= 1")
        if len(self.q_low) != n or len(self.q_high) != n:
            raise ValueError("forecast fields must share one horizon")
        for i, (lo, e, hi) in enumerate(zip(self.q_low, self.expected, self.q_high)):
            if not (lo <= e + 1e-9 and e <= hi + 1e-9):
                raise ValueError(f"step {i}: need q_low <= expected <= q_high, got {lo}, {e}, {hi}")

    @classmethod
    def of(cls, expected: Iterable[float], q_low: Iterable[float],
           q_high: Iterable[float]) -> "Forecast":
        return cls(tuple(map(float, expected)), tuple(map(float, q_low)),
                   tuple(map(float, q_high)))

    @classmethod
    def point(cls, values: Iterable[float]) -> "Forecast":
        v = tuple(map(float, values))
        return cls(v, v, v)

    @property
    def horizon(self) -> int:
        return len(self.expected)

    @property
    def robust(self) -> tuple[float, ...]:
        return self.q_high


@dataclass
class LossHistory:
    """Observed losses of the current training process.

    ``pairs[i]`` is the (model, nodes) trained during the epoch that ended
    with ``losses[i]``; ``pairs[0]`` is the starting pair (or ``None``).
    """

    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    pairs: list[tuple[str, str] | None] = field(default_factory=list)

    @classmethod
    def start(cls, initial_loss: float, pair: tuple[str, str] | None = None) -> "LossHistory":
        return cls([0], [float(initial_loss)], [pair])

    def __len__(self) -> int:
        return len(self.epochs)

    def append(self, epoch: int, loss: float, pair: tuple[str, str] | None = None) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError(f"epochs must increase strictly: {epoch} after {self.epochs[-1]}")
        if loss < 0:
            raise ValueError("loss must be >= 0")
        self.epochs.append(int(epoch))
        self.losses.append(float(loss))
        self.pairs.append(pair)

    @property
    def next_epoch(self) -> int:
        """0-based index of the epoch that would run next."""
        if not self.epochs:
            raise EstimatorError("empty loss history")
        return self.epochs[-1]

    def run_deltas(self, model: str, nodes: str) -> tuple[list[int], list[float]]:
        """Epoch indices and loss deltas of epochs that trained ``(model, nodes)``
        without switching model first."""
        ks, ds = [], []
        for i in range(1, len(self.epochs)):
            pair = self.pairs[i]
            if pair != (model, nodes):
                continue
            prev = self.pairs[i - 1]
            if prev is not None and prev[0] != model:
                continue  # switch epoch: delta includes the change penalty
            ks.append(self.epochs[i - 1])
            ds.append(self.losses[i] - self.losses[i - 1])
        return ks, ds

    def tail(self, n: int = 5) -> list[float]:
        return self.losses[-n:]


class Estimator(Protocol):
    def forecast_run(self, history: LossHistory, model: ModelProfile,
                     nodes: NodeSetProfile, horizon: int) -> Forecast: ...

    def forecast_change(self, history: LossHistory, model_from: ModelProfile,
                        model_to: ModelProfile) -> Forecast: ...


def forecast_run(estimator: Estimator, history: LossHistory, nodes: NodeSetProfile,
                 model: ModelProfile, horizon: int = 5) -> Forecast:
    if len(history) == 0:
        raise EstimatorError("empty loss history")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return estimator.forecast_run(history, model, nodes, horizon)


def forecast_change(estimator: Estimator, history: LossHistory, model_from: ModelProfile,
                    model_to: ModelProfile) -> Forecast:
    if len(history) == 0:
        raise EstimatorError("empty loss history")
    if model_from.id == model_to.id:
        return Forecast.point([0.0])
    return estimator.forecast_change(history, model_from, model_to)


# ---------------------------------------------------------------------------
# oracle

@dataclass(frozen=True)
class OracleEstimator:
    """Predictions read from the ground truth.

    ``band`` is an absolute half-width. ``noise_z``, when set, widens the band
    by ``noise_z * noise_sigma * |mean|`` so it tracks the multiplicative noise
    (``Z_90`` gives the true 0.05/0.95 quantiles of untruncated noise).
    """

    truth: TruthParams
    bias: float = 0.0
    band: float = 0.0
    noise_z: float | None = None
    change_band: float | None = None

    def forecast_run(self, history, model, nodes, horizon):
        k0 = history.next_epoch
        exp, lo, hi = [], [], []
        for i in range(horizon):
            base = mean_run_delta(self.truth, k0 + i, model.id, nodes.id)
            half = self.band
            if self.noise_z is not None:
                half += self.noise_z * self.truth.noise_sigma * abs(base)
            mu = base + self.bias
            exp.append(mu)
            lo.append(mu - half)
            hi.append(mu + half)
        return Forecast.of(exp, lo, hi)

    def forecast_change(self, history, model_from, model_to):
        p = true_change_delta(self.truth, model_from.id, model_to.id)
        band = self.band if self.change_band is None else self.change_band
        return Forecast.of([p], [p - band], [p + band])


# ---------------------------------------------------------------------------
# curve fit

def _exp_model(k, a, b):
    return -a * np.exp(-b * k)


def _power_model(k, a, b):
    return -a * np.power(k + 1.0, -b)


def fit_run_curve(epochs: Sequence[int], deltas: Sequence[float],
                  family: RunFamily = RunFamily.EXP_DECAY) -> RunParams:
    """Least-squares fit of ``(lambda0, decay)`` to observed training deltas."""
    k = np.asarray(epochs, dtype=float)
    y = np.asarray(deltas, dtype=float)
    if len(k) < 2:
        raise EstimatorError("need at least two observations to fit a decay curve")
    model = _exp_model if family is RunFamily.EXP_DECAY else _power_model
    # log-linear start point
    mag = np.clip(-y, 1e-12, None)
    x = k if family is RunFamily.EXP_DECAY else np.log(k + 1.0)
    slope, intercept = np.polyfit(x, np.log(mag), 1)
    p0 = (float(np.exp(intercept)), max(float(-slope), 0.0))
    try:
        (a, b), _ = curve_fit(model, k, y, p0=p0, bounds=([0.0, 0.0], [np.inf, np.inf]),
                              maxfev=5000)
    except RuntimeError:
        a, b = p0
    return RunParams(float(a), float(b))


def _family_value(family: RunFamily, p: RunParams, k: float) -> float:
    if family is RunFamily.EXP_DECAY:
        return -p.lambda0 * math.exp(-k * p.decay)
    return -p.lambda0 * (k + 1.0) ** (-p.decay)


@dataclass(frozen=True)
class CurveFitEstimator:
    """Fits the decay family to the history of the requested (model, nodes).

    Pairs with fewer than ``min_points`` observed epochs fall back to
    ``prior``. The band is ``z`` residual standard deviations plus
    ``min_band``.
    """

    family: RunFamily = RunFamily.EXP_DECAY
    prior: Mapping[tuple[str, str], RunParams] = field(default_factory=dict)
    change_penalty: Mapping[tuple[str, str], float] = field(default_factory=dict)
    min_points: int = 4
    tail: int | None = 10
    z: float = Z_90
    min_band: float = 0.0
    change_band: float = 0.0

    def fit(self, history: LossHistory, model: str, nodes: str) -> tuple[RunParams, float]:
        ks, ds = history.run_deltas(model, nodes)
        if self.tail is not None:
            ks, ds = ks[-self.tail:], ds[-self.tail:]
        if len(ks) >= max(self.min_points, 2):
            p = fit_run_curve(ks, ds, self.family)
            resid = np.asarray(ds) - np.array([_family_value(self.family, p, k) for k in ks])
            dof = max(len(ks) - 2, 1)
            spread = float(np.sqrt(np.sum(resid ** 2) / dof))
            return p, spread
        if (model, nodes) in self.prior:
            return self.prior[(model, nodes)], 0.0
        raise EstimatorError(f"no history or prior for model={model!r} nodes={nodes!r}")

    def forecast_run(self, history, model, nodes, horizon):
        p, spread = self.fit(history, model.id, nodes.id)
        half = self.z * spread + self.min_band
        k0 = history.next_epoch
        exp = [_family_value(self.family, p, k0 + i) for i in range(horizon)]
        return Forecast.of(exp, [e - half for e in exp], [e + half for e in exp])

    def forecast_change(self, history, model_from, model_to):
        try:
            p = self.change_penalty[(model_from.id, model_to.id)]
        except KeyError:
            raise EstimatorError(f"no change penalty for {model_from.id!r} -> {model_to.id!r}") from None
        return Forecast.of([p], [p - self.change_band], [p + self.change_band])


# ---------------------------------------------------------------------------
# prediction table

TABLE_HEADER = ["kind", "epoch", "model", "nodes", "model_to", "expected", "q05", "q95"]


@dataclass(frozen=True)
class TableEstimator:
    """Predictions replayed from a CSV file.

    Run rows are keyed by (epoch, model, nodes); change rows by
    (model, model_to, switch epoch), where an empty epoch matches any epoch.
    """

    run: Mapping[tuple[int, str, str], tuple[float, float, float]]
    change: Mapping[tuple[str, str, int | None], tuple[float, float, float]]

    def forecast_run(self, history, model, nodes, horizon):
        k0 = history.next_epoch
        rows = []
        for i in range(horizon):
            key = (k0 + i, model.id, nodes.id)
            if key not in self.run:
                raise EstimatorError(f"prediction table has no run row for epoch={key[0]} "
                                     f"model={model.id!r} nodes={nodes.id!r}")
            rows.append(self.run[key])
        exp, lo, hi = zip(*rows)
        return Forecast.of(exp, lo, hi)

    def forecast_change(self, history, model_from, model_to):
        k = history.next_epoch
        for key in ((model_from.id, model_to.id, k), (model_from.id, model_to.id, None)):
            if key in self.change:
                e, lo, hi = self.change[key]
                return Forecast.of([e], [lo], [hi])
        raise EstimatorError(f"prediction table has no change row for "
                             f"{model_from.id!r} -> {model_to.id!r} at epoch {k}")


def load_prediction_table(path: str | Path) -> TableEstimator:
    run: dict = {}
    change: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TABLE_HEADER:
            raise EstimatorError(f"{path}: expected header {','.join(TABLE_HEADER)}")
        for line, row in enumerate(reader, start=2):
            values = (float(row["expected"]), float(row["q05"]), float(row["q95"]))
            epoch = int(row["epoch"]) if row["epoch"].strip() else None
            if row["kind"] == "run":
                if epoch is None:
                    raise EstimatorError(f"{path}:{line}: run rows need an epoch")
                run[(epoch, row["model"], row["nodes"])] = values
            elif row["kind"] == "change":
                change[(row["model"], row["model_to"], epoch)] = values
            else:
                raise EstimatorError(f"{path}:{line}: unknown kind {row['kind']!r}")
    return TableEstimator(run, change)


def write_prediction_table(estimator: TableEstimator, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        for (k, m, n), (e, lo, hi) in sorted(estimator.run.items()):
            w.writerow(["run", k, m, n, "", repr(e), repr(lo), repr(hi)])
        for (m, m2, k), (e, lo, hi) in sorted(estimator.change.items(),
                                              key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or -1)):
            w.writerow(["change", "" if k is None else k, m, "", m2, repr(e), repr(lo), repr(hi)])


# ---------------------------------------------------------------------------
# wrappers and post-processing

@dataclass(frozen=True)
class BiasedEstimator:
    """Adds a constant offset to every run-forecast entry of one model."""

    base: Estimator
    model_id: str
    offset: float

    def forecast_run(self, history, model, nodes, horizon):
        f = self.base.forecast_run(history, model, nodes, horizon)
        if model.id != self.model_id or self.offset == 0.0:
            return f
        d = self.offset
        return Forecast.of([v + d for v in f.expected], [v + d for v in f.q_low],
                           [v + d for v in f.q_high])

    def forecast_change(self, history, model_from, model_to):
        return self.base.forecast_change(history, model_from, model_to)


def clamp_to_bounds(forecast: Forecast, floor: Sequence[float] | None = None) -> Forecast:
    """Raise robust values that fall below a known lower bound.

    ``expected`` is raised too where the floor exceeds it, keeping
    ``q_low <= expected <= q_high``.
    """
    if floor is None:
        return forecast
    if len(floor) != forecast.horizon:
        raise ValueError(f"floor has {len(floor)} steps, forecast has {forecast.horizon}")
    hi = [max(h, f) for h, f in zip(forecast.q_high, floor)]
    exp = [max(e, f) for e, f in zip(forecast.expected, floor)]
    return Forecast.of(exp, forecast.q_low, hi)


@dataclass(frozen=True)
class EstimatorMetrics:
    mae: float
    mil: float
    icp: float


def estimator_metrics(predicted: Sequence[Forecast],
                      realized: Sequence[float | Sequence[float]]) -> EstimatorMetrics:
    """MAE of ``expected``, mean interval length and interval coverage.

    Each realised entry is either one delta (compared with the first
    forecast step) or a sequence compared step by step.
    """
    if len(predicted) != len(realized):
        raise ValueError(f"{len(predicted)} forecasts vs {len(realized)} realised values")
    if not predicted:
        raise ValueError("no forecasts to evaluate")
    err, width, hit = [], [], []
    for f, r in zip(predicted, realized):
        seq = [r] if isinstance(r, (int, float)) else list(r)
        if len(seq) > f.horizon:
            raise ValueError("more realised steps than forecast horizon")
        for i, x in enumerate(seq):
            err.append(abs(f.expected[i] - x))
            width.append(f.q_high[i] - f.q_low[i])
            hit.append(f.q_low[i] - _EPS <= x <= f.q_high[i] + _EPS)
    return EstimatorMetrics(float(np.mean(err)), float(np.mean(width)), float(np.mean(hit)))
