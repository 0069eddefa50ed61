"""Reference strategies run on the true loss dynamics: exhaustive optimum,
a fixed-order schedule that balances per-model loss improvement, and the
best schedule that switches model exactly once."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Sequence

from .dynamics import TruthParams, advance
from .planner import Outcome, Trajectory, append_step
from .scenario import INFEASIBLE, Action, Scenario, State, available_actions, step_cost

_TOL = 1e-9


class BudgetExceeded(RuntimeError):
    """Enumeration budget ran out; ``best_energy`` is the incumbent bound."""

    def __init__(self, expanded: int, best_energy: float):
        super().__init__(f"enumeration budget exhausted after {expanded} expansions "
                         f"(best energy so far: {best_energy})")
        self.expanded = expanded
        self.best_energy = best_energy


@dataclass
class StrategyResult:
    name: str
    trajectory: Trajectory
    evaluated: int = 0

    @property
    def total_energy(self) -> float:
        return self.trajectory.total_energy if self.feasible else math.inf

    @property
    def feasible(self) -> bool:
        return self.trajectory.outcome is Outcome.TARGET_REACHED


def default_max_epochs(scenario: Scenario) -> int:
    """Most epochs that fit in the time limit."""
    times = [c.time for c in scenario.costs.run.values() if c.time is not INFEASIBLE and c.time > 0]
    return int(math.floor(scenario.constraints.time_limit / min(times) + _TOL))


def _reached(scenario: Scenario, state: State) -> bool:
    c = scenario.constraints
    return state.loss <= c.loss_target + _TOL and state.elapsed <= c.time_limit + _TOL


def replay(scenario: Scenario, truth: TruthParams, actions: Sequence[Action],
           stop_at_target: bool = True) -> Trajectory:
    """Enact ``actions`` from the initial state under the true dynamics."""
    state = scenario.initial_state()
    traj = Trajectory(initial_loss=state.loss)
    for a in actions:
        if stop_at_target and _reached(scenario, state):
            break
        new, tr = advance(scenario, truth, state, a)
        append_step(traj, state, a, tr.delta_loss, tr.delta_time, tr.delta_energy, new.loss)
        state = new
    if _reached(scenario, state):
        traj.outcome = Outcome.TARGET_REACHED
    elif state.elapsed > scenario.constraints.time_limit + _TOL:
        traj.outcome = Outcome.TIME_EXCEEDED
    else:
        traj.outcome = Outcome.NO_FEASIBLE_PATH
    return traj


def _infeasible(name: str, scenario: Scenario, evaluated: int) -> StrategyResult:
    traj = Trajectory(outcome=Outcome.NO_FEASIBLE_PATH, initial_loss=scenario.constraints.initial_loss)
    return StrategyResult(name, traj, evaluated)


# ---------------------------------------------------------------------------
# exhaustive optimum

def brute_force_optimum(scenario: Scenario, truth: TruthParams, max_epochs: int | None = None,
                        budget: int = 10**7) -> StrategyResult:
    """Minimum-energy action sequence reaching the loss target in time.

    Depth-first over action sequences in (model, nodes) order. A prefix is
    abandoned once its energy reaches the incumbent or its time exceeds the
    limit, so among equal-energy optima the lexicographically first is kept.
    """
    if max_epochs is None:
        max_epochs = default_max_epochs(scenario)
    limit = scenario.constraints.time_limit
    best_energy = math.inf
    best_seq: list[Action] | None = None
    expanded = 0
    seq: list[Action] = []
    energy = 0.0

    def dfs(state: State, energy: float) -> None:
        nonlocal best_energy, best_seq, expanded
        if _reached(scenario, state):
            if energy < best_energy:
                best_energy, best_seq = energy, list(seq)
            return
        if len(seq) >= max_epochs:
            return
        for a in available_actions(scenario, state):
            cost = step_cost(scenario, state, a)
            if state.elapsed + cost.delta_time > limit + _TOL:
                continue
            if energy + cost.delta_energy >= best_energy:
                continue
            expanded += 1
            if expanded > budget:
                raise BudgetExceeded(expanded - 1, best_energy)
            new, _ = advance(scenario, truth, state, a)
            seq.append(a)
            dfs(new, energy + cost.delta_energy)
            seq.pop()

    dfs(scenario.initial_state(), energy)
    if best_seq is None:
        return _infeasible("OPTIMUM", scenario, expanded)
    return StrategyResult("OPTIMUM", replay(scenario, truth, best_seq), expanded)


# ---------------------------------------------------------------------------
# StaticLearn

def model_order(scenario: Scenario) -> list[str]:
    """Models from largest to most compressed, starting at the start model."""
    ordered = sorted(scenario.models, key=lambda m: (m.pruning_ratio, m.id))
    ids = [m.id for m in ordered]
    return ids[ids.index(scenario.start[0]):]


def improvements_balanced(improvements: Sequence[float], margin: float) -> bool:
    """Pairwise relative difference |a-b|/max(a,b) within ``margin``."""
    lo, hi = min(improvements), max(improvements)
    if hi <= 0:
        return False
    return (hi - lo) / hi <= margin + 1e-12


def _nodes_for(scenario: Scenario, model: str) -> list[str]:
    return [n for (m, n) in scenario.runnable_pairs() if m == model]


class _Sim:
    """Incremental simulation that also tracks the gross training improvement
    of each model segment."""

    def __init__(self, scenario: Scenario, truth: TruthParams):
        self.scenario, self.truth = scenario, truth
        self.state = scenario.initial_state()
        self.actions: list[Action] = []
        self.energy = 0.0

    def copy(self) -> "_Sim":
        other = _Sim.__new__(_Sim)
        other.scenario, other.truth = self.scenario, self.truth
        other.state, other.actions, other.energy = self.state, list(self.actions), self.energy
        return other

    def step(self, a: Action) -> float | None:
        """Enact ``a``; returns the gross run improvement, or None if the
        action is infeasible or breaks the time limit."""
        cost = step_cost(self.scenario, self.state, a)
        if cost is INFEASIBLE:
            return None
        if self.state.elapsed + cost.delta_time > self.scenario.constraints.time_limit + _TOL:
            return None
        prev = self.state
        self.state, tr = advance(self.scenario, self.truth, prev, a)
        self.actions.append(a)
        self.energy += cost.delta_energy
        penalty = 0.0 if prev.model == a.next_model else self.truth.change_penalty.get(
            (prev.model, a.next_model), 0.0)
        return -(tr.delta_loss - penalty)

    @property
    def reached(self) -> bool:
        return _reached(self.scenario, self.state)


def static_learn(scenario: Scenario, truth: TruthParams, margin: float = 0.05,
                 max_epochs: int | None = None) -> StrategyResult:
    """Cheapest schedule that runs every model in compression order for at
    least one epoch, with per-model loss improvements balanced within
    ``margin``. The last model trains until the target is reached."""
    order = model_order(scenario)
    if len(order) < 2:
        raise ValueError("static_learn needs at least two models")
    if max_epochs is None:
        max_epochs = default_max_epochs(scenario)
    best: tuple[float, list[Action]] | None = None
    evaluated = 0

    for nodes in product(*(_nodes_for(scenario, m) for m in order)):
        pairs = [Action(m, n) for m, n in zip(order, nodes)]

        def search(sim: _Sim, seg: int, done: list[float]) -> None:
            nonlocal best, evaluated
            a = pairs[seg]
            last = seg == len(pairs) - 1
            total = 0.0
            while len(sim.actions) < max_epochs:
                gain = sim.step(a)
                if gain is None:
                    return
                total += gain
                if last:
                    if sim.reached:
                        evaluated += 1
                        if improvements_balanced(done + [total], margin) and (
                                best is None or sim.energy < best[0] - 1e-12):
                            best = (sim.energy, list(sim.actions))
                        return
                    if min(done) < (1 - margin) * total - 1e-12:
                        return
                    continue
                if sim.reached:
                    return
                if done and min(done) < (1 - margin) * total - 1e-12:
                    return  # this segment already outgrew the earlier ones
                search(sim.copy(), seg + 1, done + [total])

        search(_Sim(scenario, truth), 0, [])

    if best is None:
        return _infeasible("STATIC_LEARN", scenario, evaluated)
    return StrategyResult("STATIC_LEARN", replay(scenario, truth, best[1]), evaluated)


# ---------------------------------------------------------------------------
# OneSwitch

def one_switch(scenario: Scenario, truth: TruthParams,
               max_epochs: int | None = None) -> StrategyResult:
    """Cheapest schedule that trains (m1, n1) for k1 epochs, then switches
    once to (m2, n2) and trains until the target is reached.

    Every ordered pair of distinct models is tried, restricted to switches
    the cost tables allow, together with every node-set choice and every
    switch epoch k1 >= 1.
    """
    if len(scenario.models) < 2:
        raise ValueError("one_switch needs at least two models")
    if max_epochs is None:
        max_epochs = default_max_epochs(scenario)
    start = scenario.initial_state()
    firsts = available_actions(scenario, start)
    best: tuple[float, list[Action]] | None = None
    evaluated = 0

    for p1 in firsts:
        for p2 in scenario.runnable_pairs():
            p2 = Action(*p2)
            if p2.next_model == p1.next_model:
                continue
            if step_cost(scenario, State(0, 0.0, 0.0, *p1), p2) is INFEASIBLE:
                continue
            head = _Sim(scenario, truth)
            for k1 in range(1, max_epochs):
                if head.step(p1) is None:
                    break
                evaluated += 1
                sim = head.copy()
                while len(sim.actions) < max_epochs:
                    if sim.step(p2) is None:
                        break
                    if sim.reached:
                        if best is None or sim.energy < best[0] - 1e-12:
                            best = (sim.energy, list(sim.actions))
                        break
                    if best is not None and sim.energy >= best[0]:
                        break

    if best is None:
        return _infeasible("ONE_SWITCH", scenario, evaluated)
    return StrategyResult("ONE_SWITCH", replay(scenario, truth, best[1], stop_at_target=False),
                          evaluated)
