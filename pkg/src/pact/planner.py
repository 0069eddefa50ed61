"""Receding-horizon planner over the expanded graph.

Each epoch the planner rebuilds the graph from the realised state using
robust loss forecasts, collects the cheapest path to every feasible vertex,
scores those paths by energy, opportunity and risk, and enacts the first
action of the best one.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .dynamics import TruthParams, advance
from .estimators import Estimator, LossHistory
from .graph import OMEGA, Edge, ExpandedGraph, VertexKey, build_graph, grid_index, predict
from .scenario import INFEASIBLE, Action, Constraints, Scenario, State, available_actions, step_cost

_TOL = 1e-9


class Outcome(str, enum.Enum):
    TARGET_REACHED = "TARGET_REACHED"
    TIME_EXCEEDED = "TIME_EXCEEDED"
    NO_FEASIBLE_PATH = "NO_FEASIBLE_PATH"


class NoFeasiblePath(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    """Planner knobs.

    horizon: forecast length in epochs; ``None`` forecasts over the whole
        graph depth. Steps past the horizon reuse the last forecast value.
    truncate_scoring: only edges within the horizon enter the opportunity sums.
    max_depth: graph lookahead in epochs (``None``: bounded by the time limit).
    risk_mode: ``"bounded"`` scores each path by the cheaper of its own weight
        and its best route back through the current model; ``"strict"`` uses
        the route through the current model alone, replacing a missing route
        by ``risk_cap_factor`` times the largest feasible path weight.
    """

    horizon: int | None = 5
    truncate_scoring: bool = False
    max_depth: int | None = 100
    expand_feasible: bool = False
    prune_dominated: bool = True
    carry_loss: bool = True
    risk_mode: str = "bounded"
    risk_cap_factor: float = 10.0
    max_epochs: int | None = None

    def __post_init__(self):
        if self.risk_mode not in ("bounded", "strict"):
            raise ValueError(f"unknown risk_mode {self.risk_mode!r}")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")


class FeasiblePath(NamedTuple):
    path: tuple[VertexKey, ...]
    weight: float


@dataclass(frozen=True)
class ScoredPath:
    path: tuple[VertexKey, ...]
    weight: float
    le: float
    lr: float
    opp: float
    wr: float
    risk: float
    score: float

    @property
    def action(self) -> Action:
        first = self.path[1]
        return Action(first.model, first.nodes)


# ---------------------------------------------------------------------------
# feasible paths

def _topological(graph: ExpandedGraph, start: VertexKey) -> list[VertexKey]:
    reach = graph.reachable_from(start)
    return sorted(reach, key=lambda v: (v.epoch, v.model, v.nodes, v.loss_i, v.time_i))


def shortest_paths(graph: ExpandedGraph, start: VertexKey):
    """Minimum-energy distance and predecessor for every vertex reachable from
    ``start``. Edges advance the epoch by one, so epoch order is topological."""
    dist = {start: 0.0}
    pred: dict[VertexKey, Edge] = {}
    for v in _topological(graph, start):
        dv = dist[v]
        for e in graph.out_edges(v):
            if e.target is OMEGA:
                continue
            d = dv + e.weight
            if d < dist.get(e.target, math.inf):
                dist[e.target] = d
                pred[e.target] = e
    return dist, pred


def find_feasible_paths(graph: ExpandedGraph, current: VertexKey | None = None) -> list[FeasiblePath]:
    """Cheapest path from ``current`` to every reachable vertex linked to OMEGA."""
    current = graph.origin if current is None else current
    if current not in graph.vertices:
        raise KeyError(f"{current} is not a vertex of the graph")
    dist, pred = shortest_paths(graph, current)
    out = []
    for v in sorted(dist, key=lambda v: (v.epoch, v.model, v.nodes, v.loss_i, v.time_i)):
        if v not in graph.feasible:
            continue
        path = [v]
        while path[-1] != current:
            path.append(pred[path[-1]].source)
        path.reverse()
        weight = 0.0
        for a, b in zip(path, path[1:]):
            weight += _edge(graph, a, b).weight
        out.append(FeasiblePath(tuple(path), weight))
    return out


def _edge(graph: ExpandedGraph, a: VertexKey, b: VertexKey) -> Edge:
    for e in graph.out_edges(a):
        if e.target == b:
            return e
    raise KeyError(f"no edge {a} -> {b}")


# ---------------------------------------------------------------------------
# scoring

def _costs_to_go(graph: ExpandedGraph, start: VertexKey, model: str):
    """Cheapest energy to OMEGA from each vertex, unrestricted and through
    some vertex that runs ``model``."""
    order = _topological(graph, start)
    to_omega: dict[VertexKey, float] = {}
    via_model: dict[VertexKey, float] = {}
    for v in reversed(order):
        best = math.inf
        best_via = math.inf
        for e in graph.out_edges(v):
            if e.target is OMEGA:
                best = min(best, e.weight)
                continue
            best = min(best, e.weight + to_omega[e.target])
            best_via = min(best_via, e.weight + via_model[e.target])
        to_omega[v] = best
        via_model[v] = best if v.model == model else best_via
    return to_omega, via_model


def opportunity(le: float, lr: float) -> float:
    """Ratio of expected to robust loss change; 1 when undefined."""
    if lr == 0.0 or le * lr <= 0.0:
        return 1.0
    return le / lr


def score_paths(graph: ExpandedGraph, paths: Iterable[FeasiblePath],
                config: PlannerConfig = PlannerConfig()) -> list[ScoredPath]:
    paths = [p for p in paths if len(p.path) > 1]
    if not paths:
        return []
    origin = paths[0].path[0]
    _, via_model = _costs_to_go(graph, origin, origin.model)
    cap = config.risk_cap_factor * max(p.weight for p in paths)
    horizon = config.horizon if config.truncate_scoring else None

    scored = []
    for p in paths:
        le = lr = 0.0
        for i, (a, b) in enumerate(zip(p.path, p.path[1:])):
            if horizon is not None and i >= horizon:
                break
            e = _edge(graph, a, b)
            le += e.expected
            lr += e.robust
        opp = opportunity(le, lr)
        first = p.path[1]
        wr = _edge(graph, origin, first).weight + via_model.get(first, math.inf)
        if p.weight <= 0.0:
            risk = 1.0
        elif config.risk_mode == "bounded":
            risk = min(wr, p.weight) / p.weight
        else:
            risk = (wr if math.isfinite(wr) else cap) / p.weight
        score = p.weight * risk / opp
        scored.append(ScoredPath(p.path, p.weight, le, lr, opp, wr, risk, score))
    return scored


def _rank(s: ScoredPath):
    first = s.path[1]
    return (s.score, s.weight, first.model, first.nodes)


def choose_action(graph: ExpandedGraph, paths: Iterable[FeasiblePath],
                  config: PlannerConfig = PlannerConfig()) -> Action:
    """Action leading to the first vertex of the minimum-score path."""
    scored = score_paths(graph, paths, config)
    if not scored:
        raise NoFeasiblePath("no feasible path leaves the current state")
    return min(scored, key=_rank).action


def choose_from_scores(scored: Sequence[ScoredPath]) -> ScoredPath:
    if not scored:
        raise NoFeasiblePath("no feasible path leaves the current state")
    return min(scored, key=_rank)


# ---------------------------------------------------------------------------
# trajectories

class TrajectoryRecord(NamedTuple):
    epoch: int
    model: str
    nodes: str
    action_model: str
    action_nodes: str
    delta_loss: float
    delta_time: float
    delta_energy: float
    cum_time: float
    cum_energy: float
    loss: float


TRAJECTORY_HEADER = list(TrajectoryRecord._fields)


@dataclass
class Trajectory:
    records: list[TrajectoryRecord] = field(default_factory=list)
    outcome: Outcome = Outcome.TARGET_REACHED
    initial_loss: float | None = None

    @property
    def epochs(self) -> int:
        return len(self.records)

    @property
    def total_energy(self) -> float:
        return self.records[-1].cum_energy if self.records else 0.0

    @property
    def total_time(self) -> float:
        return self.records[-1].cum_time if self.records else 0.0

    @property
    def final_loss(self) -> float | None:
        return self.records[-1].loss if self.records else self.initial_loss

    def actions(self) -> list[Action]:
        return [Action(r.action_model, r.action_nodes) for r in self.records]

    def energy_by_model(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.records:
            out[r.action_model] = out.get(r.action_model, 0.0) + r.delta_energy
        return out

    def first_switch_epoch(self) -> int | None:
        """Epoch index of the first model change, if any."""
        for r in self.records:
            if r.action_model != r.model:
                return r.epoch
        return None


def append_step(traj: Trajectory, state: State, action: Action, dl: float, dt: float,
                de: float, new_loss: float) -> None:
    cum_t = traj.total_time + dt
    cum_e = traj.total_energy + de
    traj.records.append(TrajectoryRecord(state.epoch, state.model, state.nodes, action.next_model,
                                         action.next_nodes, dl, dt, de, cum_t, cum_e, new_loss))


def write_trajectory_csv(traj: Trajectory, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for r in traj.records:
        w.writerow([r.epoch, r.model, r.nodes, r.action_model, r.action_nodes,
                    *(repr(float(x)) for x in r[5:])])
    w.writerow(["outcome", traj.outcome.value])
    text = buf.getvalue()
    if path is not None:
        _atomic_write(Path(path), text)
    return text


def read_trajectory_csv(source: str | Path) -> Trajectory:
    text = str(source)
    if "\n" not in text:
        text = Path(source).read_text()
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0] != TRAJECTORY_HEADER:
        raise ValueError("not a trajectory CSV")
    if rows[-1][0] != "outcome":
        raise ValueError("trajectory CSV lacks the outcome footer")
    records = []
    for row in rows[1:-1]:
        records.append(TrajectoryRecord(int(row[0]), row[1], row[2], row[3], row[4],
                                        *(float(x) for x in row[5:])))
    return Trajectory(records, Outcome(rows[-1][1]))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# episode loop

@dataclass
class PlanStep:
    graph: ExpandedGraph
    paths: list[FeasiblePath]
    scored: list[ScoredPath]
    chosen: ScoredPath | None


def plan_step(scenario: Scenario, estimator: Estimator, history: LossHistory, state: State,
              config: PlannerConfig = PlannerConfig()) -> PlanStep:
    """Build the graph from ``state`` and pick the next action."""
    c, q = scenario.constraints, scenario.quantization
    layers = math.ceil(c.time_limit / q.gamma_time - _TOL) + 1
    depth = layers if config.max_depth is None else min(config.max_depth, layers)
    horizon = config.horizon if config.horizon is not None else depth + 1
    preds = predict(scenario, estimator, history, horizon)
    graph = build_graph(scenario, preds, state, max_depth=depth,
                        expand_feasible=config.expand_feasible,
                        prune_dominated=config.prune_dominated,
                        carry_loss=config.carry_loss)
    paths = find_feasible_paths(graph)
    scored = score_paths(graph, paths, config)
    chosen = choose_from_scores(scored) if scored else None
    return PlanStep(graph, paths, scored, chosen)


def run_episode(scenario: Scenario, estimator: Estimator, truth: TruthParams,
                config: PlannerConfig = PlannerConfig()) -> Trajectory:
    """Plan and enact one action per epoch until the target is met or no
    feasible plan remains."""
    c = scenario.constraints
    state = scenario.initial_state()
    history = LossHistory.start(state.loss, scenario.start)
    traj = Trajectory(initial_loss=state.loss)
    pending: list[Action] = []
    while True:
        if state.loss <= c.loss_target + _TOL and state.elapsed <= c.time_limit + _TOL:
            traj.outcome = Outcome.TARGET_REACHED
            return traj
        if config.max_epochs is not None and state.epoch >= config.max_epochs:
            traj.outcome = Outcome.TIME_EXCEEDED
            return traj
        step = plan_step(scenario, estimator, history, state, config)
        if step.chosen is not None:
            action = step.chosen.action
            pending = [Action(v.model, v.nodes) for v in step.chosen.path[2:]]
        elif pending and plan_reaches_target(scenario, estimator, history, state, pending):
            # the new graph can lose a route the previous one certified; keep following it
            action, pending = pending[0], pending[1:]
        else:
            traj.outcome = _stall_outcome(scenario, state)
            return traj
        new, tr = advance(scenario, truth, state, action)
        append_step(traj, state, action, tr.delta_loss, tr.delta_time, tr.delta_energy, new.loss)
        history.append(new.epoch, new.loss, (new.model, new.nodes))
        state = new


def plan_reaches_target(scenario: Scenario, estimator: Estimator, history: LossHistory,
                        state: State, actions: Sequence[Action]) -> bool:
    """Whether ``actions`` from ``state`` end on a feasible grid cell under the
    robust forecasts."""
    c, q = scenario.constraints, scenario.quantization
    preds = predict(scenario, estimator, history, len(actions))
    loss, t, cur = min(max(state.loss, 0.0), c.initial_loss), state.elapsed, state
    for i, a in enumerate(actions):
        cost = step_cost(scenario, cur, a)
        if cost is INFEASIBLE:
            return False
        _, change = preds.change_delta(cur.model, a.next_model)
        _, run = preds.run_delta(state.epoch + i, a.next_model, a.next_nodes)
        loss = min(max(loss + change + run, 0.0), c.initial_loss)
        t += cost.delta_time
        cur = State(cur.epoch + 1, loss, t, a.next_model, a.next_nodes)
    return (grid_index(loss, q.gamma_loss) <= math.floor(c.loss_target / q.gamma_loss + _TOL)
            and grid_index(t, q.gamma_time) <= math.floor(c.time_limit / q.gamma_time + _TOL))


def _stall_outcome(scenario: Scenario, state: State) -> Outcome:
    if state.epoch == 0:
        return Outcome.NO_FEASIBLE_PATH
    limit = scenario.constraints.time_limit
    for a in available_actions(scenario, state):
        if state.elapsed + step_cost(scenario, state, a).delta_time <= limit + _TOL:
            return Outcome.NO_FEASIBLE_PATH
    return Outcome.TIME_EXCEEDED


# ---------------------------------------------------------------------------
# value function (diagnostic)

@dataclass(frozen=True)
class ValueConfig:
    ideal_offset: float | None = None     # t0; default 0.1 * time_limit
    logistic_scale: float | None = None   # s; default 0.05 * initial_loss


def ideal_loss(t: float, constraints: Constraints, t0: float) -> float:
    """Power law through (0, initial_loss) and (time_limit, loss_target)."""
    l0, lmax, tmax = constraints.initial_loss, constraints.loss_target, constraints.time_limit
    b = math.log(l0 / lmax) / math.log((tmax + t0) / t0)
    return l0 * ((t + t0) / t0) ** (-b)


def state_value(state: State, constraints: Constraints, config: ValueConfig = ValueConfig()) -> float:
    c = constraints
    if state.loss < c.loss_target and state.elapsed <= c.time_limit:
        return 1.0
    if state.elapsed > c.time_limit and state.loss >= c.loss_target:
        return 0.0
    t0 = config.ideal_offset if config.ideal_offset is not None else 0.1 * c.time_limit
    s = config.logistic_scale if config.logistic_scale is not None else 0.05 * c.initial_loss
    if t0 <= 0 or s <= 0:
        raise ValueError("ideal_offset and logistic_scale must be > 0")
    x = (ideal_loss(state.elapsed, c, t0) - state.loss) / s
    if x < -700:
        return 0.0
    return 1.0 / (1.0 + math.exp(-x))
