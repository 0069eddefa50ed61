"""Time-expanded decision graph.

Vertices are quantized system states ``(epoch, model, nodes, loss, time)``;
an edge is one epoch under an action and carries that action's energy.
Every state meeting the loss target within the time limit has a zero-cost
edge to the virtual sink ``OMEGA``.

Losses and times are stored as integer indices on their lattices
(``loss = loss_i * gamma_loss``) so that grid membership is exact.
"""

from __future__ import annotations

import functools
import gc
import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

from .estimators import Estimator, Forecast, LossHistory, clamp_to_bounds, forecast_change, forecast_run
from .scenario import INFEASIBLE, Action, Scenario, State, step_cost

_TOL = 1e-9


class _Omega:
    def __repr__(self) -> str:
        return "OMEGA"


OMEGA = _Omega()


def grid_index(value: float, resolution: float) -> int:
    """Index of the smallest lattice point >= value."""
    return max(0, math.ceil(value / resolution - _TOL))


def quantize_up(value: float, resolution: float) -> float:
    """Smallest integer multiple of ``resolution`` that is >= ``value``."""
    return round(grid_index(value, resolution) * resolution, 12)


class VertexKey(NamedTuple):
    epoch: int
    model: str
    nodes: str
    loss_i: int
    time_i: int


class Edge(NamedTuple):
    source: VertexKey
    target: object  # VertexKey or OMEGA
    weight: float
    expected: float  # expected loss delta (change + run)
    robust: float    # robust loss delta used to place the target


def switch_category(u: VertexKey, v: VertexKey) -> str:
    model = u.model != v.model
    nodes = u.nodes != v.nodes
    if model and nodes:
        return "both"
    if model:
        return "model"
    if nodes:
        return "nodes"
    return "neither"


@dataclass
class LossPredictions:
    """Per-(model, nodes) run forecasts and per-model-pair change forecasts,
    anchored at ``origin_epoch``. Steps beyond a forecast's horizon repeat its
    last value."""

    origin_epoch: int
    run: dict[tuple[str, str], Forecast]
    change: dict[tuple[str, str], Forecast] = field(default_factory=dict)

    def run_delta(self, epoch: int, model: str, nodes: str) -> tuple[float, float]:
        f = self.run[(model, nodes)]
        i = min(max(epoch - self.origin_epoch, 0), f.horizon - 1)
        return f.expected[i], f.q_high[i]

    def change_delta(self, model_from: str, model_to: str) -> tuple[float, float]:
        if model_from == model_to:
            return 0.0, 0.0
        f = self.change[(model_from, model_to)]
        return f.expected[0], f.q_high[0]


class PredictionError(RuntimeError):
    pass


def predict(scenario: Scenario, estimator: Estimator, history: LossHistory, horizon: int,
            floors: dict[tuple[str, str], Sequence[float]] | None = None) -> LossPredictions:
    """Query ``estimator`` for every runnable pair and every allowed model switch."""
    run = {}
    for m, n in scenario.runnable_pairs():
        try:
            f = forecast_run(estimator, history, scenario.node_set(n), scenario.model(m), horizon)
        except Exception as exc:
            raise PredictionError(f"run forecast failed at epoch={history.next_epoch} "
                                  f"model={m!r} nodes={n!r}: {exc}") from exc
        if floors and (m, n) in floors:
            f = clamp_to_bounds(f, list(floors[(m, n)])[: f.horizon])
        run[(m, n)] = f
    change = {}
    for (m, n, m2, n2), cc in scenario.costs.change.items():
        if m == m2 or (m, m2) in change:
            continue
        if cc.time is INFEASIBLE or cc.energy is INFEASIBLE:
            continue
        try:
            change[(m, m2)] = forecast_change(estimator, history, scenario.model(m), scenario.model(m2))
        except Exception as exc:
            raise PredictionError(f"change forecast failed at epoch={history.next_epoch} "
                                  f"{m!r} -> {m2!r}: {exc}") from exc
    return LossPredictions(history.next_epoch, run, change)


@dataclass
class ExpandedGraph:
    scenario: Scenario
    origin: VertexKey
    vertices: dict[VertexKey, None]
    adjacency: dict[VertexKey, list[Edge]]
    feasible: set[VertexKey]
    full_grid: bool = False

    @property
    def gamma_loss(self) -> float:
        return self.scenario.quantization.gamma_loss

    @property
    def gamma_time(self) -> float:
        return self.scenario.quantization.gamma_time

    def loss_of(self, v: VertexKey) -> float:
        return round(v.loss_i * self.gamma_loss, 12)

    def time_of(self, v: VertexKey) -> float:
        return round(v.time_i * self.gamma_time, 12)

    def __contains__(self, v) -> bool:
        return v is OMEGA or v in self.vertices

    @property
    def num_vertices(self) -> int:
        """Vertex count excluding OMEGA."""
        return len(self.vertices)

    def out_edges(self, v: VertexKey) -> list[Edge]:
        return self.adjacency.get(v, [])

    def edges(self) -> Iterator[Edge]:
        for v in self.vertices:
            yield from self.adjacency.get(v, ())

    def num_edges(self) -> int:
        return sum(len(es) for es in self.adjacency.values())

    def omega_in_degree(self) -> int:
        return len(self.feasible)

    def reachable_from(self, start: VertexKey | None = None) -> set[VertexKey]:
        start = self.origin if start is None else start
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for e in self.adjacency.get(v, ()):
                if e.target is not OMEGA and e.target not in seen:
                    seen.add(e.target)
                    stack.append(e.target)
        return seen


def vertex_count_formula(n_models: int, n_nodes: int, time_limit: float, gamma_time: float,
                         initial_loss: float, gamma_loss: float) -> int:
    layers = math.ceil(time_limit / gamma_time - _TOL)
    loss_levels = math.floor(initial_loss / gamma_loss + _TOL) + 1
    time_levels = math.floor(time_limit / gamma_time + _TOL) + 1
    return n_models * n_nodes * layers * loss_levels * time_levels


def origin_vertex(scenario: Scenario, state: State) -> VertexKey:
    c, q = scenario.constraints, scenario.quantization
    loss = min(max(state.loss, 0.0), c.initial_loss)
    return VertexKey(state.epoch, state.model, state.nodes, _loss_index(loss, scenario),
                     grid_index(state.elapsed, q.gamma_time))


def _loss_index(loss: float, scenario: Scenario) -> int:
    # the top cell also holds losses between the last lattice point and the initial loss
    g = scenario.quantization.gamma_loss
    return min(grid_index(loss, g), math.floor(scenario.constraints.initial_loss / g + _TOL))


def _without_cyclic_gc(fn):
    # Builds allocate millions of acyclic tuples; generational collections over
    # them would make build time grow faster than the graph.
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        was_enabled = gc.isenabled()
        gc.disable()
        try:
            return fn(*args, **kwargs)
        finally:
            if was_enabled:
                gc.enable()
    return wrapper


@_without_cyclic_gc
def build_graph(scenario: Scenario, predictions: LossPredictions, origin_state: State, *,
                full_grid: bool = False, max_depth: int | None = None,
                expand_feasible: bool = True, prune_dominated: bool = False,
                carry_loss: bool = True) -> ExpandedGraph:
    """Build the expanded graph rooted at ``origin_state``.

    ``full_grid`` materialises every lattice vertex over ``ceil(Tmax/gamma_T)``
    epoch layers starting at the origin's epoch (edges leaving the lattice are
    dropped). Otherwise only vertices reachable from the origin are created,
    optionally limited to ``max_depth`` epochs, without expanding feasible
    vertices (``expand_feasible=False``) and discarding vertices dominated by
    a same-(epoch, model, nodes, loss) vertex reached sooner at no greater
    energy (``prune_dominated=True``).

    With ``carry_loss`` (reachable build only) successor losses start from the
    largest unrounded predicted loss over all arrivals into a vertex rather
    than from its grid value, so decrements smaller than the loss resolution
    still make progress. Taking the largest keeps every edge an upper bound
    on the loss of any path through it. The vertex key is the grid value
    either way.
    """
    c, q = scenario.constraints, scenario.quantization
    g_l, g_t = q.gamma_loss, q.gamma_time
    t_max, l0 = c.time_limit, c.initial_loss
    target_i = math.floor(c.loss_target / g_l + _TOL)
    time_top = math.floor(t_max / g_t + _TOL)
    loss_top = math.floor(l0 / g_l + _TOL)
    layers = math.ceil(t_max / g_t - _TOL)

    origin = origin_vertex(scenario, origin_state)
    k0 = origin.epoch

    # per (model, nodes): actions with (dt, de) and the switch loss terms
    moves: dict[tuple[str, str], list[tuple[Action, float, float, float, float]]] = {}
    for m, n in scenario.runnable_pairs():
        probe = State(0, 0.0, 0.0, m, n)
        out = []
        for m2 in sorted(scenario.model_ids):
            for n2 in sorted(scenario.node_ids):
                a = Action(m2, n2)
                sc = step_cost(scenario, probe, a)
                if sc is INFEASIBLE:
                    continue
                ce, cr = predictions.change_delta(m, m2)
                out.append((a, sc.delta_time, sc.delta_energy, ce, cr))
        moves[(m, n)] = out
    run_cache: dict[tuple[int, str, str], tuple[float, float]] = {}
    carried: dict[VertexKey, float] = {}

    def successors(v: VertexKey, loss: float | None = None) -> list[tuple[Edge, float]]:
        edges = []
        if loss is None:
            loss = v.loss_i * g_l
        t = v.time_i * g_t
        for a, dt, de, ce, cr in moves.get((v.model, v.nodes), ()):
            t2 = t + dt
            if t2 > t_max + _TOL:
                continue
            key = (v.epoch, a.next_model, a.next_nodes)
            rd = run_cache.get(key)
            if rd is None:
                rd = run_cache[key] = predictions.run_delta(*key)
            l2 = min(max(loss + cr + rd[1], 0.0), l0)
            li = min(grid_index(l2, g_l), loss_top)
            ti = grid_index(t2, g_t)
            if ti > time_top:
                continue
            w = VertexKey(v.epoch + 1, a.next_model, a.next_nodes, li, ti)
            edges.append((Edge(v, w, de, ce + rd[0], cr + rd[1]), l2))
        return edges

    vertices: dict[VertexKey, None] = {}
    adjacency: dict[VertexKey, list[Edge]] = {}
    feasible: set[VertexKey] = set()

    def finish(v: VertexKey, out: list[Edge]) -> None:
        if v.loss_i <= target_i and v.time_i <= time_top:
            feasible.add(v)
            out.append(Edge(v, OMEGA, 0.0, 0.0, 0.0))
        adjacency[v] = out

    if full_grid:
        pairs = [(m, n) for m in scenario.model_ids for n in scenario.node_ids]
        for m, n in pairs:
            for k in range(k0, k0 + layers):
                for li in range(loss_top + 1):
                    for ti in range(time_top + 1):
                        vertices[VertexKey(k, m, n, li, ti)] = None
        if origin not in vertices:
            raise ValueError(f"origin {origin} lies outside the lattice")
        for v in vertices:
            out = [e for e, _ in successors(v, v.loss_i * g_l)
                   if e.target.epoch < k0 + layers and e.target.loss_i <= loss_top]
            finish(v, out)
        return ExpandedGraph(scenario, origin, vertices, adjacency, feasible, full_grid=True)

    # reachable-only build, layer by layer (every edge advances one epoch)
    depth_cap = layers + 1 if max_depth is None else max_depth
    if carry_loss:
        carried[origin] = min(max(origin_state.loss, 0.0), l0)
    layer = {origin: 0.0}
    depth = 0
    while layer:
        nxt: dict[VertexKey, float] = {}
        for v in sorted(layer, key=_vertex_order):
            vertices[v] = None
            is_feasible = v.loss_i <= target_i and v.time_i <= time_top
            out: list[Edge] = []
            if depth < depth_cap and (expand_feasible or not is_feasible):
                dv = layer[v]
                for e, l2 in successors(v, carried.get(v) if carry_loss else None):
                    out.append(e)
                    if dv + e.weight < nxt.get(e.target, math.inf):
                        nxt[e.target] = dv + e.weight
                    if carry_loss:
                        carried[e.target] = max(carried.get(e.target, l2), l2)
            finish(v, out)
        if prune_dominated and nxt:
            nxt = _prune_dominated(nxt, carried if carry_loss else {})
            for v in layer:
                adjacency[v] = [e for e in adjacency[v] if e.target is OMEGA or e.target in nxt]
        layer = nxt
        depth += 1
    return ExpandedGraph(scenario, origin, vertices, adjacency, feasible)


def _vertex_order(v: VertexKey):
    return (v.model, v.nodes, v.loss_i, v.time_i)


def _prune_dominated(layer: dict[VertexKey, float],
                     carried: dict[VertexKey, float]) -> dict[VertexKey, float]:
    """Drop vertices matched in (model, nodes, loss cell) by another vertex
    that is no later, no costlier and carries no larger unrounded loss."""
    groups: dict[tuple, list[VertexKey]] = {}
    for v in layer:
        groups.setdefault((v.model, v.nodes, v.loss_i), []).append(v)
    kept = {}
    for vs in groups.values():
        vs.sort(key=lambda v: (v.time_i, layer[v], carried.get(v, 0.0)))
        front: list[tuple[float, float]] = []
        for v in vs:
            d, c = layer[v], carried.get(v, 0.0)
            if any(fd <= d + 1e-12 and fc <= c + 1e-12 for fd, fc in front):
                continue
            kept[v] = d
            front.append((d, c))
    return kept


# ---------------------------------------------------------------------------
# export

_EDGE_STYLE = {
    "nodes": 'color="green", style="solid"',
    "model": 'color="purple", style="solid"',
    "both": 'color="blue", style="dashed"',
    "neither": 'color="black", style="dotted"',
}


def _dot_id(v) -> str:
    if v is OMEGA:
        return '"OMEGA"'
    return f'"{v.epoch}|{v.model}|{v.nodes}|{v.loss_i}|{v.time_i}"'


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def export_dot(graph: ExpandedGraph, reachable_only: bool = False) -> str:
    """Render the graph in DOT. Edges carry their switch category and energy."""
    keep = graph.reachable_from() if reachable_only else set(graph.vertices)
    lines = ["digraph expanded {", "  rankdir=LR;", '  node [shape=box, fontsize=9];',
             '  "OMEGA" [label="Ω", shape=doublecircle];']
    for v in graph.vertices:
        if v not in keep:
            continue
        label = (f"k={v.epoch}\\n{v.model}@{v.nodes}\\n"
                 f"l={_fmt(graph.loss_of(v))} T={_fmt(graph.time_of(v))}")
        extra = ", peripheries=2" if v == graph.origin else ""
        lines.append(f'  {_dot_id(v)} [label="{label}"{extra}];')
    for v in graph.vertices:
        if v not in keep:
            continue
        for e in graph.adjacency.get(v, ()):
            if e.target is OMEGA:
                lines.append(f'  {_dot_id(v)} -> "OMEGA" [color="gray", weight=0, label="0"];')
            else:
                cat = switch_category(v, e.target)
                lines.append(f'  {_dot_id(v)} -> {_dot_id(e.target)} '
                             f'[{_EDGE_STYLE[cat]}, category="{cat}", label="{_fmt(e.weight)}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_dot(graph: ExpandedGraph, path: str | Path, reachable_only: bool = True) -> None:
    Path(path).write_text(export_dot(graph, reachable_only))


def dump_adjacency(graph: ExpandedGraph, path: str | Path) -> None:
    """Gzip text dump, one ``from_key -> to_key weight`` row per edge."""
    with gzip.open(path, "wt") as fh:
        for e in graph.edges():
            fh.write(f"{_dot_id(e.source)} -> {_dot_id(e.target)} {e.weight!r}\n")
