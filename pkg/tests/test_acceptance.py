"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import math
import random
import time
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pydot
import pytest

from conftest import make_scenario, random_grid_instance
from pact.baselines import brute_force_optimum, static_learn
from pact.cli import main
from pact.dynamics import RunParams, TruthParams, dump_truth, load_truth, mean_run_delta
from pact.estimators import Z_90, BiasedEstimator, Forecast, LossHistory, OracleEstimator
from pact.graph import OMEGA, LossPredictions, build_graph, vertex_count_formula
from pact.harness import DEFAULT_LOSS_TARGETS, compare, estimator_eval
from pact.planner import Outcome, PlannerConfig, plan_step, run_episode
from pact.scenario import dump_scenario, load_scenario, reference_scenario_path, reference_truth_path

EXACT = PlannerConfig(horizon=None, max_epochs=200)


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})")
    return emit


@lru_cache(maxsize=None)
def _reference():
    return load_scenario(reference_scenario_path()), load_truth(reference_truth_path())


@lru_cache(maxsize=None)
def _static_learn_energy(loss_target: float) -> float:
    sc, truth = _reference()
    return static_learn(sc.with_overrides(loss_target=loss_target), truth, max_epochs=200).total_energy


def test_optimal_under_exact_predictions(report):
    rng = random.Random(2024)
    start = time.perf_counter()
    checked, mismatches, mixed = 0, [], 0
    while checked < 60:
        sc, truth = random_grid_instance(rng, time_limit=10)
        opt = brute_force_optimum(sc, truth, max_epochs=10)
        if not opt.feasible:
            continue
        checked += 1
        mixed += len(set(opt.trajectory.actions())) > 1
        traj = run_episode(sc, OracleEstimator(truth), truth, EXACT)
        if traj.outcome is not Outcome.TARGET_REACHED or traj.total_energy != opt.total_energy:
            mismatches.append((traj.outcome, traj.total_energy, opt.total_energy))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 120
    report(1, "optimality with exact predictions", ok,
           f"{checked} instances, {mixed} with mixed schedules, {len(mismatches)} mismatches, "
           f"{elapsed:.1f}s")
    assert not mismatches
    assert elapsed < 120


def _dense_scenario(n_models, n_nodes, time_limit, gamma_time, initial_loss, gamma_loss):
    models = {f"m{i}": i / (n_models + 1) for i in range(n_models)}
    nodes = [f"n{j}" for j in range(n_nodes)]
    run = {(m, n): (gamma_time, 1.0 + i) for i, (m, n) in
           enumerate((m, n) for m in models for n in nodes)}
    change = [(m, n, m2, n2, 0.0, 0.5) for (m, n) in run for (m2, n2) in run if (m, n) != (m2, n2)]
    return make_scenario(models, nodes, run, change, loss_target=initial_loss / 2,
                         time_limit=time_limit, initial_loss=initial_loss,
                         gamma_loss=gamma_loss, gamma_time=gamma_time)


def _constant_predictions(sc, delta):
    run = {p: Forecast.point([delta]) for p in sc.runnable_pairs()}
    change = {(a, b): Forecast.point([0.0]) for a in sc.model_ids for b in sc.model_ids if a != b}
    return LossPredictions(0, run, change)


def _lattice_count(n_models, n_nodes, time_limit, gamma_time, initial_loss, gamma_loss):
    # exact rational arithmetic, independent of the float tolerance in the library
    t, gt = Fraction(str(time_limit)), Fraction(str(gamma_time))
    l0, gl = Fraction(str(initial_loss)), Fraction(str(gamma_loss))
    return n_models * n_nodes * math.ceil(t / gt) * (math.floor(l0 / gl) + 1) * (math.floor(t / gt) + 1)


def test_vertex_count_and_build_scaling(report):
    rng = random.Random(7)
    mismatches = []
    for _ in range(25):
        dims = (rng.randint(1, 3), rng.randint(1, 3))
        gt = rng.choice([0.1, 0.2, 0.25, 0.3, 0.5])
        tmax = round(rng.uniform(max(gt, 0.5), 3.0), 2)
        gl = rng.choice([0.1, 0.2, 0.25, 0.3])
        l0 = round(rng.uniform(max(gl, 0.5), 2.0), 2)
        sc = _dense_scenario(*dims, tmax, gt, l0, gl)
        g = build_graph(sc, _constant_predictions(sc, -gl), sc.initial_state(), full_grid=True)
        expected = _lattice_count(*dims, tmax, gt, l0, gl)
        if g.num_vertices != expected or vertex_count_formula(*dims, tmax, gt, l0, gl) != expected:
            mismatches.append((dims, tmax, gt, l0, gl, g.num_vertices, expected))

    units, seconds = [], []
    for layers in (4, 8, 16, 32, 50):
        sc = _dense_scenario(2, 2, float(layers), 1.0, 1.0, 0.25)
        preds = _constant_predictions(sc, -0.25)
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            g = build_graph(sc, preds, sc.initial_state(), full_grid=True)
            best = min(best, time.perf_counter() - t0)
        units.append(g.num_vertices * 2 * 2)
        seconds.append(best)
    slope = float(np.polyfit(np.log(units), np.log(seconds), 1)[0])
    span = units[-1] / units[0]
    ok = not mismatches and slope <= 1.2 and span >= 100
    report(2, "vertex count and build scaling", ok,
           f"25 tuples, {len(mismatches)} count mismatches, log-log slope {slope:.2f} "
           f"over a {span:.0f}x size range")
    assert not mismatches
    assert span >= 100
    assert slope <= 1.2


def test_reference_benchmark_ordering(report):
    sc, truth = _reference()
    start = time.perf_counter()
    rep = compare(sc, truth, DEFAULT_LOSS_TARGETS, OracleEstimator(truth), EXACT,
                  budget=10**7, max_epochs=200)
    elapsed = time.perf_counter() - start
    gaps, violations = [], []
    for lt in DEFAULT_LOSS_TARGETS:
        opt, pact = rep.energy(lt, "OPTIMUM"), rep.energy(lt, "PACT")
        others = min(rep.energy(lt, "STATIC_LEARN"), rep.energy(lt, "ONE_SWITCH"))
        if not (opt <= pact + 1e-9 and pact <= others + 1e-9 and math.isfinite(pact)):
            violations.append(lt)
        gaps.append((pact - opt) / opt)
    ok = not violations and max(gaps) <= 0.05 and elapsed < 300
    report(3, "benchmark ordering on the reference scenario", ok,
           f"{len(DEFAULT_LOSS_TARGETS)} loss targets, ordering violations {violations}, "
           f"max gap to optimum {100 * max(gaps):.2f}%, {elapsed:.0f}s")
    assert not violations
    assert max(gaps) <= 0.05
    assert elapsed < 300


def test_robust_feasibility_guarantee(report):
    rng = random.Random(99)
    episodes = violations = skipped = 0
    while episodes < 200:
        sigma, clip = rng.choice([0.1, 0.3, 0.5]), 1.5
        sc, truth = random_grid_instance(rng, time_limit=10, noise_sigma=sigma, noise_clip=clip)
        # band of clip * sigma * |mean| covers every truncated noise draw
        est = OracleEstimator(truth, noise_z=clip)
        state = sc.initial_state()
        first = plan_step(sc, est, LossHistory.start(state.loss, sc.start), state, EXACT)
        if not first.paths:
            skipped += 1
            continue
        episodes += 1
        if run_episode(sc, est, truth, EXACT).outcome is not Outcome.TARGET_REACHED:
            violations += 1
    ok = violations == 0
    report(4, "robust feasibility guarantee", ok,
           f"{episodes} episodes with a feasible epoch-0 plan ({skipped} without), "
           f"{violations} violations")
    assert violations == 0


def test_loss_resolution_delays_switching(report):
    sc, truth = _reference()
    est = OracleEstimator(truth)
    fine = run_episode(sc.with_overrides(loss_target=0.15, gamma_loss=0.01), est, truth, EXACT)
    coarse = run_episode(sc.with_overrides(loss_target=0.15, gamma_loss=0.1), est, truth, EXACT)
    assert fine.outcome is Outcome.TARGET_REACHED and coarse.outcome is Outcome.TARGET_REACHED
    k_fine, k_coarse = fine.first_switch_epoch(), coarse.first_switch_epoch()
    ok = (k_fine is not None and k_coarse is not None and k_coarse >= k_fine
          and coarse.total_energy >= fine.total_energy - 1e-9)
    report(5, "coarser loss resolution switches no earlier", ok,
           f"first switch epoch {k_coarse} vs {k_fine}, energy {coarse.total_energy:.3f} vs "
           f"{fine.total_energy:.3f}")
    assert k_fine is not None and k_coarse is not None
    assert k_coarse >= k_fine
    assert coarse.total_energy >= fine.total_energy - 1e-9


def test_bias_robustness(report):
    sc, truth = _reference()
    offset = 0.2 * truth.run_params[("L", "gold")].lambda0
    infeasible, not_better = [], []
    for sign in (-1, 1):
        est = BiasedEstimator(OracleEstimator(truth), "L", sign * offset)
        for lt in [v for v in DEFAULT_LOSS_TARGETS if v >= 0.15]:
            traj = run_episode(sc.with_overrides(loss_target=lt), est, truth, EXACT)
            if traj.outcome is not Outcome.TARGET_REACHED:
                infeasible.append((sign, lt))
                continue
            if lt <= 0.3 and not traj.total_energy < _static_learn_energy(lt):
                not_better.append((sign, lt, traj.total_energy))
    ok = not infeasible and not not_better
    report(6, "bias robustness", ok,
           f"bias +/-{offset:.4f} on model L, infeasible runs {infeasible}, "
           f"runs not below StaticLearn {not_better}")
    assert not infeasible
    assert not not_better


def test_estimator_metric_correctness(report):
    sc = make_scenario({"A": 0.0}, ["x"], {("A", "x"): (1.0, 1.0)}, time_limit=100.0)
    exact_truth = TruthParams({("A", "x"): RunParams(0.05, 0.1)})
    band = 0.01
    exact = estimator_eval(sc, exact_truth, lambda t: OracleEstimator(t, band=band),
                           num_trajectories=3, horizon=5, epochs=20)[0]
    exact_ok = exact.mae_mean == 0.0 and math.isclose(exact.mil_mean, 2 * band) and exact.icp_mean == 1.0

    sigma = 0.1
    noisy_truth = TruthParams({("A", "x"): RunParams(0.05, 0.0)}, noise_sigma=sigma)
    noisy = estimator_eval(sc, noisy_truth, lambda t: OracleEstimator(t, noise_z=Z_90),
                           num_trajectories=1, horizon=1, epochs=10_000)[0]
    icp_ok = 0.87 <= noisy.icp_mean <= 0.93
    report(7, "estimator metrics", exact_ok and icp_ok,
           f"exact: MAE {exact.mae_mean}, MIL {exact.mil_mean:.4f} for band {2 * band}, ICP "
           f"{exact.icp_mean}; gaussian: ICP {noisy.icp_mean:.4f} over 10000 samples")
    assert exact.mae_mean == 0.0
    assert math.isclose(exact.mil_mean, 2 * band)
    assert exact.icp_mean == 1.0
    assert icp_ok


def _small_lattice_case():
    """Two models, two node sets, grid 0.1 on loss and time, starting loss 0.5.

    Decrements are chosen off grid points so float and rational ceilings agree.
    """
    models = {"L": 0.0, "S": 0.5}
    nodes = ["a", "b"]
    run = {("L", "a"): (0.5, 1.0), ("L", "b"): (0.4, 0.6), ("S", "a"): (0.3, 0.4), ("S", "b"): (0.2, 0.3)}
    change = [(m, n, m2, n2, 0.1, 0.05) for (m, n) in run for (m2, n2) in run if (m, n) != (m2, n2)]
    sc = make_scenario(models, nodes, run, change, loss_target=0.25, time_limit=1.5,
                       initial_loss=0.5, gamma_loss=0.1, gamma_time=0.1, start=("L", "a"))
    truth = TruthParams({("L", "a"): RunParams(0.32, 0.1), ("L", "b"): RunParams(0.21, 0.1),
                         ("S", "a"): RunParams(0.15, 0.05), ("S", "b"): RunParams(0.125, 0.05)},
                        {("L", "S"): 0.02, ("S", "L"): 0.01})
    return sc, truth


def _reachable_feasible_scan(sc, truth):
    """Breadth-first search over exact rational grid states."""
    g = Fraction(1, 10)
    tmax, target, l0 = Fraction(3, 2), Fraction(1, 4), Fraction(1, 2)
    runs = {k: (Fraction(str(v.time)), v.energy) for k, v in sc.costs.run.items()
            if k in sc.runnable_pairs()}
    ctime = {k: Fraction(str(v.time)) for k, v in sc.costs.change.items()}
    start = (0, "L", "a", l0, Fraction(0))
    seen, frontier = {start}, [start]
    while frontier:
        nxt = []
        for k, m, n, loss, t in frontier:
            for (m2, n2), (rt, _) in runs.items():
                dt = rt + (0 if (m, n) == (m2, n2) else ctime[(m, n, m2, n2)])
                t2 = t + dt
                if t2 > tmax:
                    continue
                pen = Fraction(truth.change_penalty.get((m, m2), 0.0)) if m != m2 else 0
                raw = loss + pen + Fraction(mean_run_delta(truth, k, m2, n2))
                raw = min(max(raw, Fraction(0)), l0)
                w = (k + 1, m2, n2, math.ceil(raw / g) * g, math.ceil(t2 / g) * g)
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier = nxt
    return {s for s in seen if s[3] <= target and s[4] <= tmax}


def test_small_lattice_structure_and_dot(report, tmp_path):
    sc, truth = _small_lattice_case()
    full = build_graph(sc, _constant_predictions(sc, -0.1), sc.initial_state(), full_grid=True)
    scanned = {v for v in full.vertices if Fraction(v.loss_i, 10) <= Fraction(1, 4)
               and Fraction(v.time_i, 10) <= Fraction(3, 2)}
    grid_ok = full.feasible == scanned and full.omega_in_degree() == len(scanned)
    omega_sources = {e.source for e in full.edges() if e.target is OMEGA}
    grid_ok = grid_ok and omega_sources == scanned

    scen_path, truth_path, dot_path = tmp_path / "s.json", tmp_path / "t.json", tmp_path / "g.dot"
    dump_scenario(sc, scen_path)
    dump_truth(truth, truth_path)
    code = main(["graph-dump", "--scenario", str(scen_path), "--truth", str(truth_path),
                 "--out", str(dot_path), "--horizon", "full"])
    (parsed,) = pydot.graph_from_dot_file(str(dot_path))
    omega_edges = [e for e in parsed.get_edges() if e.get_destination().strip('"') == "OMEGA"]
    origin_succ = {e.get_destination().strip('"') for e in parsed.get_edges()
                   if e.get_source().strip('"') == "0|L|a|5|0"}
    feasible_succ = [d for d in origin_succ
                     if any(e.get_source().strip('"') == d for e in omega_edges)]
    expected = _reachable_feasible_scan(sc, truth)
    dot_ok = code == 0 and len(omega_edges) == len(expected) > 0
    ok = grid_ok and dot_ok and len(feasible_succ) == 1
    report(8, "small lattice structure and DOT export", ok,
           f"full grid: {full.omega_in_degree()} sink edges vs {len(scanned)} scanned; "
           f"DOT: {len(omega_edges)} sink edges vs {len(expected)} from an independent search; "
           f"{len(feasible_succ)} feasible successor(s) of the origin")
    assert grid_ok
    assert code == 0
    assert len(omega_edges) == len(expected) > 0
    assert len(origin_succ) == 4 and len(feasible_succ) == 1
