"""Networked system description and per-epoch transition costs.

A scenario lists the available DNN models, the node sets that can train
them, the time/energy cost tables for running and switching, the learning
constraints, and the quantization used by the planner.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Union


class _Infeasible:
    """Marker for a cost entry that cannot be executed."""

    _instance: "_Infeasible | None" = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INFEASIBLE"

    def __reduce__(self):
        return (_Infeasible, ())


INFEASIBLE = _Infeasible()

Cost = Union[float, _Infeasible]


def is_infeasible(value: Any) -> bool:
    return value is INFEASIBLE


def add_costs(*values: Cost) -> Cost:
    """Sum cost terms, propagating INFEASIBLE."""
    total = 0.0
    for v in values:
        if v is INFEASIBLE:
            return INFEASIBLE
        total += v
    return total


class ScenarioError(ValueError):
    """Raised when a scenario document fails validation.

    ``path`` names the offending field, e.g. ``quantization.gamma_loss``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ModelProfile:
    id: str
    pruning_ratio: float
    label: str = ""


@dataclass(frozen=True)
class NodeSetProfile:
    id: str
    num_classes: int
    num_samples: int
    label: str = ""


class RunCost(NamedTuple):
    time: Cost
    energy: Cost


class StepCost(NamedTuple):
    delta_time: float
    delta_energy: float


@dataclass(frozen=True)
class CostTables:
    """Run costs keyed by ``(model, nodes)``, change costs by
    ``(model, nodes, model', nodes')``.

    Change entries that are not listed default to zero for the identity
    transition and to INFEASIBLE otherwise.
    """

    run: Mapping[tuple[str, str], RunCost]
    change: Mapping[tuple[str, str, str, str], RunCost]

    def run_time(self, m: str, n: str) -> Cost:
        return self.run[(m, n)].time

    def run_energy(self, m: str, n: str) -> Cost:
        return self.run[(m, n)].energy

    def _change(self, m: str, n: str, m2: str, n2: str) -> RunCost:
        if (m, n) == (m2, n2):
            return RunCost(0.0, 0.0)
        return self.change.get((m, n, m2, n2), RunCost(INFEASIBLE, INFEASIBLE))

    def change_time(self, m: str, n: str, m2: str, n2: str) -> Cost:
        return self._change(m, n, m2, n2).time

    def change_energy(self, m: str, n: str, m2: str, n2: str) -> Cost:
        return self._change(m, n, m2, n2).energy


@dataclass(frozen=True)
class Constraints:
    loss_target: float
    time_limit: float
    initial_loss: float


@dataclass(frozen=True)
class Quantization:
    gamma_loss: float
    gamma_time: float


@dataclass(frozen=True)
class State:
    epoch: int
    loss: float
    elapsed: float
    model: str
    nodes: str


class Action(NamedTuple):
    next_model: str
    next_nodes: str


@dataclass(frozen=True)
class Scenario:
    models: tuple[ModelProfile, ...]
    node_sets: tuple[NodeSetProfile, ...]
    costs: CostTables
    constraints: Constraints
    quantization: Quantization
    start: tuple[str, str]

    def __post_init__(self):
        _validate(self)

    @property
    def model_ids(self) -> list[str]:
        return [m.id for m in self.models]

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.node_sets]

    def model(self, model_id: str) -> ModelProfile:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    def node_set(self, nodes_id: str) -> NodeSetProfile:
        for n in self.node_sets:
            if n.id == nodes_id:
                return n
        raise KeyError(nodes_id)

    def initial_state(self) -> State:
        m, n = self.start
        return State(0, self.constraints.initial_loss, 0.0, m, n)

    def runnable_pairs(self) -> list[tuple[str, str]]:
        """(model, nodes) pairs with finite run time and energy, sorted."""
        return sorted(
            key for key, rc in self.costs.run.items()
            if rc.time is not INFEASIBLE and rc.energy is not INFEASIBLE
        )

    def with_overrides(self, *, loss_target: float | None = None,
                       gamma_loss: float | None = None,
                       gamma_time: float | None = None,
                       time_limit: float | None = None) -> "Scenario":
        """Copy with constraint/quantization fields replaced (re-validated)."""
        c = self.constraints
        q = self.quantization
        if loss_target is not None:
            c = replace(c, loss_target=float(loss_target))
        if time_limit is not None:
            c = replace(c, time_limit=float(time_limit))
        if gamma_loss is not None:
            q = replace(q, gamma_loss=float(gamma_loss))
        if gamma_time is not None:
            q = replace(q, gamma_time=float(gamma_time))
        return replace(self, constraints=c, quantization=q)


def _check_cost(path: str, value: Cost) -> None:
    if value is INFEASIBLE:
        return
    if not isinstance(value, (int, float)) or math.isnan(value) or math.isinf(value):
        raise ScenarioError(path, f"expected a finite number or 'inf', got {value!r}")
    if value < 0:
        raise ScenarioError(path, f"must be >= 0, got {value}")


def _validate(sc: Scenario) -> None:
    model_ids = [m.id for m in sc.models]
    node_ids = [n.id for n in sc.node_sets]
    if not model_ids:
        raise ScenarioError("models", "at least one model is required")
    if not node_ids:
        raise ScenarioError("node_sets", "at least one node set is required")
    if len(set(model_ids)) != len(model_ids):
        raise ScenarioError("models", "duplicate model id")
    if len(set(node_ids)) != len(node_ids):
        raise ScenarioError("node_sets", "duplicate node set id")
    for i, m in enumerate(sc.models):
        if not 0.0 <= m.pruning_ratio < 1.0:
            raise ScenarioError(f"models[{i}].pruning_ratio", "must lie in [0, 1)")
    for i, n in enumerate(sc.node_sets):
        if n.num_classes < 1:
            raise ScenarioError(f"node_sets[{i}].num_classes", "must be >= 1")
        if n.num_samples < 1:
            raise ScenarioError(f"node_sets[{i}].num_samples", "must be >= 1")

    q = sc.quantization
    c = sc.constraints
    if not q.gamma_loss > 0:
        raise ScenarioError("quantization.gamma_loss", "must be > 0")
    if not q.gamma_time > 0:
        raise ScenarioError("quantization.gamma_time", "must be > 0")
    if not c.time_limit > 0:
        raise ScenarioError("constraints.time_limit", "must be > 0")
    if not c.loss_target > 0:
        raise ScenarioError("constraints.loss_target", "must be > 0")
    if not c.loss_target < c.initial_loss:
        raise ScenarioError("constraints.loss_target", "must be < initial_loss")
    if q.gamma_loss > c.initial_loss:
        raise ScenarioError("quantization.gamma_loss", "must be <= constraints.initial_loss")
    if q.gamma_time > c.time_limit:
        raise ScenarioError("quantization.gamma_time", "must be <= constraints.time_limit")

    for m in model_ids:
        for n in node_ids:
            if (m, n) not in sc.costs.run:
                raise ScenarioError("run_costs", f"missing entry for model={m!r} nodes={n!r}")
    for (m, n), rc in sc.costs.run.items():
        if m not in model_ids:
            raise ScenarioError("run_costs", f"unknown model {m!r}")
        if n not in node_ids:
            raise ScenarioError("run_costs", f"unknown node set {n!r}")
        _check_cost(f"run_costs[{m},{n}].time", rc.time)
        _check_cost(f"run_costs[{m},{n}].energy", rc.energy)
        if rc.time is not INFEASIBLE and rc.time < q.gamma_time - 1e-12:
            # epochs shorter than the time resolution would overflow the graph's epoch range
            raise ScenarioError(f"run_costs[{m},{n}].time",
                                f"run time {rc.time} is below gamma_time {q.gamma_time}")
    for (m, n, m2, n2), cc in sc.costs.change.items():
        for mid, label in ((m, "from_model"), (m2, "to_model")):
            if mid not in model_ids:
                raise ScenarioError(f"change_costs.{label}", f"unknown model {mid!r}")
        for nid, label in ((n, "from_nodes"), (n2, "to_nodes")):
            if nid not in node_ids:
                raise ScenarioError(f"change_costs.{label}", f"unknown node set {nid!r}")
        key = f"change_costs[{m},{n}->{m2},{n2}]"
        _check_cost(f"{key}.time", cc.time)
        _check_cost(f"{key}.energy", cc.energy)
        if (m, n) == (m2, n2) and (cc.time != 0 or cc.energy != 0):
            raise ScenarioError(key, "identity transition must be free")

    if len(sc.start) != 2 or sc.start[0] not in model_ids or sc.start[1] not in node_ids:
        raise ScenarioError("start", f"unknown start pair {sc.start!r}")
    rc = sc.costs.run[tuple(sc.start)]
    if rc.time is INFEASIBLE or rc.energy is INFEASIBLE:
        raise ScenarioError("start", "starting combination is not runnable")


# ---------------------------------------------------------------------------
# transition arithmetic

def step_cost(scenario: Scenario, state: State, action: Action):
    """Time and energy of enacting ``action`` from ``state``.

    Returns a :class:`StepCost` or ``INFEASIBLE``.
    """
    costs = scenario.costs
    m, n = state.model, state.nodes
    m2, n2 = action
    dt = add_costs(costs.change_time(m, n, m2, n2), costs.run_time(m2, n2))
    de = add_costs(costs.change_energy(m, n, m2, n2), costs.run_energy(m2, n2))
    if dt is INFEASIBLE or de is INFEASIBLE:
        return INFEASIBLE
    return StepCost(dt, de)


def available_actions(scenario: Scenario, state: State) -> list[Action]:
    """Actions with a finite step cost, ordered by (model id, nodes id)."""
    out = []
    for m in sorted(scenario.model_ids):
        for n in sorted(scenario.node_ids):
            a = Action(m, n)
            if step_cost(scenario, state, a) is not INFEASIBLE:
                out.append(a)
    return out


# ---------------------------------------------------------------------------
# serialization

_TOP_KEYS = {"models", "node_sets", "run_costs", "change_costs", "constraints",
             "quantization", "start"}


def _reject_unknown(path: str, obj: Mapping, allowed: set[str], required: set[str]) -> None:
    if not isinstance(obj, Mapping):
        raise ScenarioError(path, f"expected an object, got {type(obj).__name__}")
    extra = set(obj) - allowed
    if extra:
        raise ScenarioError(path, f"unknown key(s) {sorted(extra)}")
    missing = required - set(obj)
    if missing:
        raise ScenarioError(path, f"missing key(s) {sorted(missing)}")


def _parse_cost(path: str, raw: Any) -> Cost:
    if isinstance(raw, str):
        if raw.strip().lower() == "inf":
            return INFEASIBLE
        raise ScenarioError(path, f"expected a number or 'inf', got {raw!r}")
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ScenarioError(path, f"expected a number or 'inf', got {raw!r}")
    return float(raw)


def _number(path: str, raw: Any) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ScenarioError(path, f"expected a number, got {raw!r}")
    return float(raw)


def _integer(path: str, raw: Any) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ScenarioError(path, f"expected an integer, got {raw!r}")
    return raw


def scenario_from_dict(doc: Mapping[str, Any]) -> Scenario:
    """Build and validate a Scenario from its JSON document form."""
    _reject_unknown("", doc, _TOP_KEYS, _TOP_KEYS - {"change_costs"})

    models = []
    for i, raw in enumerate(doc["models"]):
        p = f"models[{i}]"
        _reject_unknown(p, raw, {"id", "pruning_ratio", "label"}, {"id", "pruning_ratio"})
        models.append(ModelProfile(str(raw["id"]), _number(f"{p}.pruning_ratio", raw["pruning_ratio"]),
                                   str(raw.get("label", raw["id"]))))
    node_sets = []
    for i, raw in enumerate(doc["node_sets"]):
        p = f"node_sets[{i}]"
        _reject_unknown(p, raw, {"id", "num_classes", "num_samples", "label"},
                        {"id", "num_classes", "num_samples"})
        node_sets.append(NodeSetProfile(str(raw["id"]), _integer(f"{p}.num_classes", raw["num_classes"]),
                                        _integer(f"{p}.num_samples", raw["num_samples"]),
                                        str(raw.get("label", raw["id"]))))

    run: dict[tuple[str, str], RunCost] = {}
    for i, raw in enumerate(doc["run_costs"]):
        p = f"run_costs[{i}]"
        _reject_unknown(p, raw, {"model", "nodes", "time", "energy"},
                        {"model", "nodes", "time", "energy"})
        key = (str(raw["model"]), str(raw["nodes"]))
        if key in run:
            raise ScenarioError(p, f"duplicate entry for {key}")
        run[key] = RunCost(_parse_cost(f"{p}.time", raw["time"]),
                           _parse_cost(f"{p}.energy", raw["energy"]))

    change: dict[tuple[str, str, str, str], RunCost] = {}
    fields = {"from_model", "from_nodes", "to_model", "to_nodes", "time", "energy"}
    for i, raw in enumerate(doc.get("change_costs", [])):
        p = f"change_costs[{i}]"
        _reject_unknown(p, raw, fields, fields)
        key = (str(raw["from_model"]), str(raw["from_nodes"]),
               str(raw["to_model"]), str(raw["to_nodes"]))
        if key in change:
            raise ScenarioError(p, f"duplicate entry for {key}")
        change[key] = RunCost(_parse_cost(f"{p}.time", raw["time"]),
                              _parse_cost(f"{p}.energy", raw["energy"]))

    c = doc["constraints"]
    keys = {"loss_target", "time_limit", "initial_loss"}
    _reject_unknown("constraints", c, keys, keys)
    constraints = Constraints(_number("constraints.loss_target", c["loss_target"]),
                              _number("constraints.time_limit", c["time_limit"]),
                              _number("constraints.initial_loss", c["initial_loss"]))
    q = doc["quantization"]
    _reject_unknown("quantization", q, {"gamma_loss", "gamma_time"}, {"gamma_loss", "gamma_time"})
    quant = Quantization(_number("quantization.gamma_loss", q["gamma_loss"]),
                         _number("quantization.gamma_time", q["gamma_time"]))
    s = doc["start"]
    _reject_unknown("start", s, {"model", "nodes"}, {"model", "nodes"})

    return Scenario(tuple(models), tuple(node_sets), CostTables(run, change),
                    constraints, quant, (str(s["model"]), str(s["nodes"])))


def _dump_cost(v: Cost):
    return "inf" if v is INFEASIBLE else v


def scenario_to_dict(sc: Scenario) -> dict[str, Any]:
    return {
        "models": [{"id": m.id, "pruning_ratio": m.pruning_ratio, "label": m.label}
                   for m in sc.models],
        "node_sets": [{"id": n.id, "num_classes": n.num_classes,
                       "num_samples": n.num_samples, "label": n.label}
                      for n in sc.node_sets],
        "run_costs": [{"model": m, "nodes": n, "time": _dump_cost(rc.time),
                       "energy": _dump_cost(rc.energy)}
                      for (m, n), rc in sc.costs.run.items()],
        "change_costs": [{"from_model": m, "from_nodes": n, "to_model": m2, "to_nodes": n2,
                          "time": _dump_cost(cc.time), "energy": _dump_cost(cc.energy)}
                         for (m, n, m2, n2), cc in sc.costs.change.items()],
        "constraints": {"loss_target": sc.constraints.loss_target,
                        "time_limit": sc.constraints.time_limit,
                        "initial_loss": sc.constraints.initial_loss},
        "quantization": {"gamma_loss": sc.quantization.gamma_loss,
                         "gamma_time": sc.quantization.gamma_time},
        "start": {"model": sc.start[0], "nodes": sc.start[1]},
    }


def load_scenario(source: str | Path | Mapping[str, Any]) -> Scenario:
    """Load a scenario from a JSON file path, JSON text, or parsed mapping."""
    if isinstance(source, Mapping):
        return scenario_from_dict(source)
    text = str(source)
    if not text.lstrip().startswith("{"):
        text = Path(source).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"invalid JSON: {exc}") from exc
    return scenario_from_dict(doc)


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2) + "\n"


def dump_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(sc))


def reference_scenario_path() -> Path:
    """Path of the shipped three-model reference scenario."""
    return Path(__file__).parent / "data" / "reference_scenario.json"


def reference_truth_path() -> Path:
    return Path(__file__).parent / "data" / "reference_scenario.truth.json"
