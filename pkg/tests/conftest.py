import math
import random
from pathlib import Path

import pytest

from pact.dynamics import RunParams, TruthParams, load_truth, mean_run_delta
from pact.scenario import load_scenario, reference_scenario_path, reference_truth_path, scenario_from_dict


def scenario_doc(models, nodes, run, change=(), *, loss_target=0.15, time_limit=10.0,
                 initial_loss=1.0, gamma_loss=0.1, gamma_time=1.0, start=None):
    """JSON document for a scenario.

    ``models`` maps id -> pruning ratio, ``nodes`` is a list of ids, ``run``
    maps (model, nodes) -> (time, energy) with missing pairs written as
    "inf", ``change`` is a list of (m, n, m2, n2, time, energy).
    """
    runs = []
    for m in models:
        for n in nodes:
            t, e = run.get((m, n), ("inf", "inf"))
            runs.append({"model": m, "nodes": n, "time": t, "energy": e})
    if start is None:
        start = next(iter(run))
    return {
        "models": [{"id": m, "pruning_ratio": f} for m, f in models.items()],
        "node_sets": [{"id": n, "num_classes": 10, "num_samples": 1000} for n in nodes],
        "run_costs": runs,
        "change_costs": [{"from_model": a, "from_nodes": b, "to_model": c, "to_nodes": d,
                          "time": t, "energy": e} for a, b, c, d, t, e in change],
        "constraints": {"loss_target": loss_target, "time_limit": time_limit,
                        "initial_loss": initial_loss},
        "quantization": {"gamma_loss": gamma_loss, "gamma_time": gamma_time},
        "start": {"model": start[0], "nodes": start[1]},
    }


def make_scenario(*args, **kwargs):
    return scenario_from_dict(scenario_doc(*args, **kwargs))


def single_pair(run_time=1.0, run_energy=1.0, **kwargs):
    return make_scenario({"A": 0.0}, ["x"], {("A", "x"): (run_time, run_energy)}, **kwargs)


def random_grid_instance(rng: random.Random, max_pairs=9, time_limit=8, noise_sigma=0.0,
                         noise_clip=None):
    """Random scenario whose loss and time deltas all sit on the planner grid.

    Losses use a binary-exact resolution, times are integers with unit
    resolution, and change penalties never exceed the smallest run decrement
    so the loss cannot climb above its starting value.
    """
    while True:
        n_models = rng.randint(1, 3)
        n_nodes = rng.randint(1, 3)
        if n_models * n_nodes <= max_pairs:
            break
    g_l = rng.choice([0.125, 0.0625])
    models = {f"m{i}": round(i / (n_models + 1), 3) for i in range(n_models)}
    nodes = [f"n{j}" for j in range(n_nodes)]
    pairs = [(m, n) for m in models for n in nodes]
    runnable = [p for p in pairs if rng.random() < 0.8] or [pairs[0]]
    run, params = {}, {}
    for p in runnable:
        # faster learners cost more, so mixed schedules are often optimal
        speed = rng.randint(1, 4)
        run[p] = (float(rng.randint(1, 2)), float(speed + rng.randint(0, 2)))
        params[p] = RunParams(g_l * speed, rng.choice([0.0, 0.05, 0.2]))
    trial = TruthParams(params, delta_grid=g_l)
    shrink = 1.0 - noise_sigma * noise_clip if noise_clip is not None else 1.0
    min_step = shrink * min(-mean_run_delta(trial, k, m, n)
                            for (m, n) in runnable for k in range(time_limit + 1))
    change, penalty = [], {}
    for (m, n) in runnable:
        for (m2, n2) in runnable:
            if (m, n) != (m2, n2) and rng.random() < 0.6:
                change.append((m, n, m2, n2, float(rng.randint(0, 1)), float(rng.randint(0, 2))))
                if m != m2 and (m, m2) not in penalty:
                    penalty[(m, m2)] = g_l * rng.randint(0, int(min_step / g_l + 1e-9))
    initial = 1.0
    target = g_l * rng.randint(1, int(0.6 / g_l))
    start = runnable[0]
    sc = make_scenario(models, nodes, run, change, loss_target=target, time_limit=float(time_limit),
                       initial_loss=initial, gamma_loss=g_l, gamma_time=1.0, start=start)
    truth = TruthParams(params, penalty, delta_grid=g_l, noise_sigma=noise_sigma,
                        noise_clip=noise_clip, seed=rng.randint(0, 2**31))
    return sc, truth


@pytest.fixture(scope="session")
def reference():
    return load_scenario(reference_scenario_path()), load_truth(reference_truth_path())


@pytest.fixture
def reference_path() -> Path:
    return reference_scenario_path()


def close(a, b, tol=1e-9):
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)
