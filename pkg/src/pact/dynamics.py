"""Ground-truth loss evolution used to simulate training.

Per-epoch loss change is the sum of a switch penalty (depends on the
model pair only) and a training decrement (depends on the epoch index and
the model/node pair).
"""

from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple

import numpy as np

from .scenario import INFEASIBLE, Action, Scenario, State, step_cost


class RunFamily(str, enum.Enum):
    EXP_DECAY = "EXP_DECAY"
    POWER_LAW = "POWER_LAW"


class RunParams(NamedTuple):
    lambda0: float
    decay: float


class DynamicsError(KeyError):
    """Missing parameters for a requested (model, nodes) or model pair."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class InfeasibleTransition(DynamicsError):
    pass


@dataclass(frozen=True)
class TruthParams:
    """Parameters of the simulated loss dynamics.

    ``noise_clip`` truncates the standard-normal draw to ``[-clip, clip]``
    so that a band of ``clip * noise_sigma`` provably covers the noise.
    ``delta_grid`` rounds the noiseless decrement to a multiple of the given
    resolution, which keeps simulated losses on a planner grid.
    """

    run_params: Mapping[tuple[str, str], RunParams]
    change_penalty: Mapping[tuple[str, str], float] = field(default_factory=dict)
    run_family: RunFamily = RunFamily.EXP_DECAY
    noise_sigma: float = 0.0
    noise_clip: float | None = None
    seed: int = 0
    delta_grid: float | None = None

    def __post_init__(self):
        for key, p in self.run_params.items():
            if p.lambda0 < 0 or p.decay < 0:
                raise ValueError(f"run_params{key}: lambda0 and decay must be >= 0")
        for (m, m2), v in self.change_penalty.items():
            if v < 0:
                raise ValueError(f"change_penalty[{m},{m2}] must be >= 0")
            if m == m2 and v != 0:
                raise ValueError(f"change_penalty[{m},{m2}] must be 0 for identity")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.noise_clip is not None and self.noise_clip <= 0:
            raise ValueError("noise_clip must be > 0")
        if self.delta_grid is not None and self.delta_grid <= 0:
            raise ValueError("delta_grid must be > 0")

    def with_seed(self, seed: int) -> "TruthParams":
        return TruthParams(self.run_params, self.change_penalty, self.run_family,
                           self.noise_sigma, self.noise_clip, seed, self.delta_grid)

    def with_noise(self, sigma: float, clip: float | None = None) -> "TruthParams":
        return TruthParams(self.run_params, self.change_penalty, self.run_family,
                           sigma, clip, self.seed, self.delta_grid)


def mean_run_delta(params: TruthParams, epoch: int, model: str, nodes: str) -> float:
    """Noise-free training decrement (<= 0) for the given epoch index."""
    try:
        p = params.run_params[(model, nodes)]
    except KeyError:
        raise DynamicsError(f"no run parameters for model={model!r} nodes={nodes!r}") from None
    if params.run_family is RunFamily.EXP_DECAY:
        value = -p.lambda0 * math.exp(-epoch * p.decay)
    else:
        value = -p.lambda0 * (epoch + 1) ** (-p.decay)
    if params.delta_grid is not None:
        value = round(value / params.delta_grid) * params.delta_grid
    return value + 0.0  # normalise -0.0


def _pair_key(model: str, nodes: str) -> int:
    return zlib.crc32(f"{model}\x1f{nodes}".encode())


def noise_draw(seed: int, epoch: int, model: str, nodes: str) -> float:
    """Standard-normal draw for one (epoch, model, nodes) cell.

    Streams are derived from the seed by counter (epoch, pair hash), so the
    noise realisation does not depend on the order of evaluation.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(epoch, _pair_key(model, nodes)))
    return float(np.random.default_rng(ss).standard_normal())


def true_run_delta(params: TruthParams, epoch: int, model: str, nodes: str) -> float:
    base = mean_run_delta(params, epoch, model, nodes)
    if params.noise_sigma == 0.0 or base == 0.0:
        return base
    eps = noise_draw(params.seed, epoch, model, nodes)
    if params.noise_clip is not None:
        eps = min(max(eps, -params.noise_clip), params.noise_clip)
    return base * (1.0 + params.noise_sigma * eps)


def true_change_delta(params: TruthParams, model_from: str, model_to: str) -> float:
    if model_from == model_to:
        return 0.0
    try:
        return params.change_penalty[(model_from, model_to)]
    except KeyError:
        raise InfeasibleTransition(
            f"model switch {model_from!r} -> {model_to!r} has no loss penalty entry") from None


class Transition(NamedTuple):
    delta_loss: float
    delta_time: float
    delta_energy: float


def advance(scenario: Scenario, truth: TruthParams, state: State,
            action: Action) -> tuple[State, Transition]:
    """Enact one epoch under the true dynamics.

    The loss is clipped at zero; the returned delta is the realised one.
    """
    cost = step_cost(scenario, state, action)
    if cost is INFEASIBLE:
        raise InfeasibleTransition(f"action {tuple(action)} is infeasible from "
                                   f"({state.model}, {state.nodes})")
    m2, n2 = action
    dl = true_change_delta(truth, state.model, m2) + true_run_delta(truth, state.epoch, m2, n2)
    new_loss = max(0.0, state.loss + dl)
    new = State(state.epoch + 1, new_loss, state.elapsed + cost.delta_time, m2, n2)
    return new, Transition(new_loss - state.loss, cost.delta_time, cost.delta_energy)


# ---------------------------------------------------------------------------
# serialization

def truth_from_dict(doc: Mapping[str, Any]) -> TruthParams:
    allowed = {"run_family", "run_params", "change_penalty", "noise_sigma",
               "noise_clip", "seed", "delta_grid"}
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"truth: unknown key(s) {sorted(extra)}")
    run = {(str(r["model"]), str(r["nodes"])): RunParams(float(r["lambda0"]), float(r["decay"]))
           for r in doc["run_params"]}
    change = {(str(r["from_model"]), str(r["to_model"])): float(r["penalty"])
              for r in doc.get("change_penalty", [])}
    clip = doc.get("noise_clip")
    grid = doc.get("delta_grid")
    return TruthParams(
        run_params=run,
        change_penalty=change,
        run_family=RunFamily(doc.get("run_family", "EXP_DECAY")),
        noise_sigma=float(doc.get("noise_sigma", 0.0)),
        noise_clip=None if clip is None else float(clip),
        seed=int(doc.get("seed", 0)),
        delta_grid=None if grid is None else float(grid),
    )


def truth_to_dict(t: TruthParams) -> dict[str, Any]:
    return {
        "run_family": t.run_family.value,
        "run_params": [{"model": m, "nodes": n, "lambda0": p.lambda0, "decay": p.decay}
                       for (m, n), p in t.run_params.items()],
        "change_penalty": [{"from_model": m, "to_model": m2, "penalty": v}
                           for (m, m2), v in t.change_penalty.items()],
        "noise_sigma": t.noise_sigma,
        "noise_clip": t.noise_clip,
        "seed": t.seed,
        "delta_grid": t.delta_grid,
    }


def load_truth(path: str | Path) -> TruthParams:
    return truth_from_dict(json.loads(Path(path).read_text()))


def dump_truth(t: TruthParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth_to_dict(t), indent=2) + "\n")
