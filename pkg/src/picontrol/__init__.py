"""Path-integral model predictive control for teams of point-mass UAVs."""

from .config import ConfigError, ScenarioConfig, dump_scenario, load_scenario, parse_scenario
from .costs import (
    CatMouseParams,
    ControlCostSpec,
    CostModel,
    HoldingPatternParams,
    ObstacleSet,
    cat_mouse_cost,
    holding_pattern_cost,
    obstacle_violation,
    path_cost,
    smooth_obstacle_penalty,
)
from .dynamics import AgentState, ContractViolation, DynamicsModel, JointState, sample_noise, step
from .experiments import run_suite, summarize
from .ilqg import IlqgConfig, IlqgSolution, ilqg_solve, quadratize
from .pi_controller import (
    NoFeasibleSample,
    PiConfig,
    PiController,
    compute_weights,
    effective_sample_size,
    mpc_step,
    sample_rollouts,
    shift_warm_start,
    update_controls,
)
from .scenarios import run_episode
from .sim import DisturbanceModel, EpisodeLog, LowLevelModel, formation_metrics, mouse_policy, plant_step

__all__ = [
    "AgentState",
    "CatMouseParams",
    "ConfigError",
    "ContractViolation",
    "ControlCostSpec",
    "CostModel",
    "DisturbanceModel",
    "DynamicsModel",
    "EpisodeLog",
    "HoldingPatternParams",
    "IlqgConfig",
    "IlqgSolution",
    "JointState",
    "LowLevelModel",
    "NoFeasibleSample",
    "ObstacleSet",
    "PiConfig",
    "PiController",
    "ScenarioConfig",
    "cat_mouse_cost",
    "compute_weights",
    "dump_scenario",
    "effective_sample_size",
    "formation_metrics",
    "holding_pattern_cost",
    "ilqg_solve",
    "load_scenario",
    "mouse_policy",
    "mpc_step",
    "obstacle_violation",
    "parse_scenario",
    "path_cost",
    "plant_step",
    "quadratize",
    "run_episode",
    "run_suite",
    "sample_noise",
    "sample_rollouts",
    "shift_warm_start",
    "smooth_obstacle_penalty",
    "step",
    "summarize",
    "update_controls",
]
