"""Energy-aware planning of model and node-set switches during training."""

from .baselines import StrategyResult, brute_force_optimum, one_switch, static_learn
from .dynamics import (RunFamily, RunParams, TruthParams, advance, load_truth, true_change_delta,
                       true_run_delta)
from .estimators import (BiasedEstimator, CurveFitEstimator, EstimatorMetrics, Forecast, LossHistory,
                         OracleEstimator, TableEstimator, estimator_metrics)
from .graph import OMEGA, ExpandedGraph, VertexKey, build_graph, export_dot, predict
from .planner import (Outcome, PlannerConfig, ScoredPath, Trajectory, ValueConfig, choose_action,
                      find_feasible_paths, run_episode, state_value)
from .scenario import (INFEASIBLE, Action, Scenario, ScenarioError, State, available_actions,
                       load_scenario, step_cost)

__version__ = "0.1.0"
