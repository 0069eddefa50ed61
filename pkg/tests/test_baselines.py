import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_scenario, random_grid_instance, single_pair
from pact.baselines import (BudgetExceeded, brute_force_optimum, default_max_epochs,
                            improvements_balanced, model_order, one_switch, replay, static_learn)
from pact.dynamics import RunParams, TruthParams
from pact.estimators import OracleEstimator
from pact.planner import Outcome, PlannerConfig, run_episode
from pact.scenario import Action

RUN = {"L": (1.0, 3.0), "S": (1.0, 1.0)}
DROP = {"L": 0.3, "S": 0.1}
PENALTY = 0.05
SWITCH_ENERGY = 0.5


def _two_model_case(target=0.4, time_limit=3.0):
    sc = make_scenario({"L": 0.0, "S": 0.5}, ["x"],
                       {("L", "x"): RUN["L"], ("S", "x"): RUN["S"]},
                       [("L", "x", "S", "x", 0.0, SWITCH_ENERGY), ("S", "x", "L", "x", 0.0, SWITCH_ENERGY)],
                       loss_target=target, time_limit=time_limit, start=("L", "x"))
    truth = TruthParams({("L", "x"): RunParams(DROP["L"], 0.0), ("S", "x"): RunParams(DROP["S"], 0.0)},
                        {("L", "S"): PENALTY, ("S", "L"): PENALTY})
    return sc, truth


def _table_optimum(target, epochs=3):
    """Cheapest sequence over all 2**k model choices, k <= epochs, stopping at the target."""
    best = math.inf
    for k in range(1, epochs + 1):
        for seq in itertools.product("LS", repeat=k):
            loss, energy, cur = 1.0, 0.0, "L"
            for i, m in enumerate(seq):
                if m != cur:
                    loss += PENALTY
                    energy += SWITCH_ENERGY
                loss -= DROP[m]
                energy += RUN[m][1]
                cur = m
                if loss <= target + 1e-9:
                    if i == k - 1:
                        best = min(best, energy)
                    break
    return best


@pytest.mark.parametrize("target", [0.4, 0.5, 0.75, 0.85])
def test_optimum_matches_sequence_table(target):
    sc, truth = _two_model_case(target)
    res = brute_force_optimum(sc, truth)
    expected = _table_optimum(target)
    assert res.feasible
    assert res.total_energy == pytest.approx(expected)


def test_single_pair_optimum_matches_planner():
    sc = single_pair(1.0, 2.0, loss_target=0.3, time_limit=20.0)
    truth = TruthParams({("A", "x"): RunParams(0.1, 0.0)})
    opt = brute_force_optimum(sc, truth)
    pact = run_episode(sc, OracleEstimator(truth), truth, PlannerConfig(horizon=None))
    assert opt.trajectory.actions() == pact.actions()
    assert opt.total_energy == pytest.approx(pact.total_energy) == pytest.approx(14.0)


def test_unreachable_target_infeasible_everywhere():
    sc, truth = _two_model_case(target=0.05)
    assert not brute_force_optimum(sc, truth).feasible
    assert not one_switch(sc, truth).feasible
    assert not static_learn(sc, truth).feasible
    assert brute_force_optimum(sc, truth).total_energy == math.inf


def test_budget_exceeded_carries_bound():
    sc, truth = _two_model_case(target=0.4, time_limit=3.0)
    with pytest.raises(BudgetExceeded) as err:
        brute_force_optimum(sc, truth, budget=2)
    assert err.value.expanded == 2


def test_default_max_epochs():
    sc, _ = _two_model_case(time_limit=3.5)
    assert default_max_epochs(sc) == 3


def test_one_switch_enumerates_every_switch_epoch():
    sc, truth = _two_model_case(target=0.75, time_limit=3.0)
    res = one_switch(sc, truth)
    # first pair L or S (switching right away is allowed), then the other model,
    # with switch epochs k1 in {1, 2}
    assert res.evaluated == 4
    assert res.feasible
    acts = res.trajectory.actions()
    assert acts[0] == Action("L", "x") and acts[-1] == Action("S", "x")
    assert len({a.next_model for a in acts}) == 2


def test_model_order_and_balance():
    sc, _ = _two_model_case()
    assert model_order(sc) == ["L", "S"]
    assert improvements_balanced([1.0, 1.0, 1.0], 0.0)
    assert improvements_balanced([1.0, 0.96], 0.05)
    assert not improvements_balanced([1.0, 0.9], 0.05)
    assert not improvements_balanced([0.0, 0.0], 0.5)


def _three_model_case():
    models = {"L": 0.0, "M": 0.5, "S": 0.75}
    run = {("L", "x"): (1.0, 3.0), ("M", "x"): (1.0, 2.0), ("S", "x"): (1.0, 1.0)}
    change = [(a, "x", b, "x", 0.0, 0.0) for a in models for b in models if a != b]
    sc = make_scenario(models, ["x"], run, change, loss_target=0.4, time_limit=20.0,
                       start=("L", "x"))
    truth = TruthParams({("L", "x"): RunParams(0.1, 0.0), ("M", "x"): RunParams(0.1, 0.0),
                         ("S", "x"): RunParams(0.1, 0.0)},
                        {(a, b): 0.0 for a in models for b in models if a != b})
    return sc, truth


def test_static_learn_equal_thirds():
    sc, truth = _three_model_case()
    res = static_learn(sc, truth, margin=0.0)
    # 0.6 of loss to remove at 0.1 per epoch: two epochs per model
    assert [a.next_model for a in res.trajectory.actions()] == ["L", "L", "M", "M", "S", "S"]
    assert res.total_energy == pytest.approx(2 * (3 + 2 + 1))


def test_static_learn_margin_relaxation_never_hurts():
    sc, truth = _three_model_case()
    tight = static_learn(sc, truth, margin=0.05)
    loose = static_learn(sc, truth, margin=1.0)
    assert loose.total_energy <= tight.total_energy
    assert loose.total_energy == pytest.approx(3 + 2 + 4 * 1)


def test_static_learn_zero_margin_can_be_infeasible():
    sc, truth = _three_model_case()
    sc = sc.with_overrides(loss_target=0.5)  # 0.5 split three ways is not a multiple of 0.1
    assert not static_learn(sc, truth, margin=0.0).feasible


def test_reference_static_learn_costs_more_than_optimum(reference):
    sc, truth = reference
    sc = sc.with_overrides(loss_target=0.15)
    sl = static_learn(sc, truth, max_epochs=200)
    opt = brute_force_optimum(sc, truth, max_epochs=200)
    assert sl.feasible and opt.feasible
    assert sl.total_energy > opt.total_energy


def test_replay_stops_at_target():
    sc, truth = _two_model_case(target=0.4)
    traj = replay(sc, truth, [Action("L", "x")] * 3)
    assert traj.outcome is Outcome.TARGET_REACHED and traj.epochs == 2
    short = replay(sc, truth, [Action("L", "x")])
    assert short.outcome is Outcome.NO_FEASIBLE_PATH


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_optimum_is_a_lower_bound(seed):
    sc, truth = random_grid_instance(random.Random(seed), max_pairs=4, time_limit=6)
    opt = brute_force_optimum(sc, truth)
    rivals = [one_switch(sc, truth)] if len(sc.models) > 1 else []
    if len(model_order(sc)) > 1:
        rivals.append(static_learn(sc, truth))
    for res in rivals:
        if res.feasible:
            assert opt.feasible
            assert opt.total_energy <= res.total_energy + 1e-9
            assert res.trajectory.total_time <= sc.constraints.time_limit + 1e-9
    if opt.feasible:
        again = replay(sc, truth, opt.trajectory.actions())
        assert again.total_energy == pytest.approx(opt.total_energy)
        assert again.final_loss <= sc.constraints.loss_target + 1e-9
