"""Turn a validated :class:`ScenarioConfig` into runnable episodes.

``build`` assembles the initial state, the planner cost models and the
plant for one seed; ``run_episode`` runs one controller on it and returns
the log together with a flat row of metrics.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .config import ScenarioConfig
from .costs import (
    CatMouseParams,
    CostModel,
    GoalCost,
    HoldingPatternCost,
    HoldingPatternParams,
    HoldingPatternTask,
    ObstacleSet,
    QuadraticCost,
    SmoothObstaclePenalty,
    SumCost,
    obstacle_violation,
)
from .dynamics import discrete_matrices
from .ilqg import IlqgConfig, IlqgController, IlqgSolution, ilqg_solve
from .pi_controller import PiConfig, PiController
from .riccati import finite_horizon_lqr
from .sim import (
    DisturbanceModel,
    EpisodeLog,
    LowLevelModel,
    MouseModel,
    Plant,
    _gap_cv,
    formation_metrics,
    run_closed_loop,
    smoothed,
)

Array = NDArray[np.float64]

# Stream ids for SeedSequence spawn keys; the planner uses 7 (see sim).
_INIT_STREAM = 3


@dataclass
class Scenario:
    """Everything needed to run one seed of a scenario."""

    cfg: ScenarioConfig
    seed: int
    x0: Array
    pi_config: PiConfig
    pi_cost: CostModel
    ilqg_config: IlqgConfig | None
    ilqg_cost: CostModel | None
    plant: Plant
    warm: Array | None = None
    hp_params: HoldingPatternParams | None = None


def pi_config(cfg: ScenarioConfig) -> PiConfig:
    p = cfg.pi
    return PiConfig(p.n_samples, p.horizon_s, p.dt_s, p.lam, p.sigma_u, p.replan_hz)


def _hp_params(cfg: ScenarioConfig) -> HoldingPatternParams:
    c = cfg.cost
    return HoldingPatternParams(c.v_min, c.v_max, c.d, c.C_hit, c.arena)


def initial_state(cfg: ScenarioConfig, seed: int) -> Array:
    """Initial joint state: explicit from the file, or random with a minimum separation."""
    a = cfg.agents
    x0 = np.zeros((a.M, 4))
    if a.init == "explicit":
        x0[:, :2] = np.asarray(a.positions, dtype=np.float64)
        if a.velocities is not None:
            x0[:, 2:] = np.asarray(a.velocities, dtype=np.float64)
        return x0
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_INIT_STREAM,)))
    for _ in range(10_000):
        p = rng.uniform(-a.spawn_radius, a.spawn_radius, size=(a.M, 2))
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        if a.M == 1 or d[np.triu_indices(a.M, 1)].min() > a.min_separation:
            x0[:, :2] = p
            return x0
    raise ValueError("could not place agents with the requested min_separation")


def _quadratic_blocks(cfg: ScenarioConfig) -> tuple[Array, Array]:
    m = cfg.agents.M
    return np.kron(np.eye(m), np.diag(cfg.cost.q_diag)), np.kron(np.eye(m), np.diag(cfg.cost.q_terminal_diag))


def riccati_warm_start(cfg: ScenarioConfig, x0: Array) -> Array:
    """Finite-horizon LQR feedforward from ``x0`` on the planner grid, shape ``(S, M, 2)``."""
    pc = pi_config(cfg)
    m = cfg.agents.M
    A, B = discrete_matrices(pc.dt_s, m)
    Q, QT = _quadratic_blocks(cfg)
    R = pc.control_cost.R(2 * m)
    sol = finite_horizon_lqr(A, B, Q, R, QT, pc.steps, pc.dt_s, x0.reshape(-1))
    return sol.controls.reshape(pc.steps, m, 2)


def _control_weight(cfg: ScenarioConfig) -> float:
    if cfg.ilqg.control_weight is not None:
        return cfg.ilqg.control_weight
    return cfg.pi.lam / cfg.pi.sigma_u**2


def build(cfg: ScenarioConfig, seed: int) -> Scenario:
    """Assemble the scenario for ``seed``."""
    c = cfg.cost
    m = cfg.agents.M
    x0 = initial_state(cfg, seed)
    pc = pi_config(cfg)
    obstacles = ObstacleSet.from_corners(c.obstacles, c.agent_radius) if c.obstacles else ObstacleSet(
        np.zeros((0, 2, 2)), c.agent_radius
    )
    mouse = None
    hp = None
    warm = None
    ilqg_cost = None
    ilqg_horizon = cfg.ilqg.horizon_s or cfg.pi.horizon_s

    if cfg.kind == "lq_oracle":
        Q, QT = _quadratic_blocks(cfg)
        pi_cost = CostModel(QuadraticCost(Q), QuadraticCost(QT))
        ilqg_cost = pi_cost
        log_cost = pi_cost.running_cost
        if cfg.pi.warm_start == "riccati":
            warm = riccati_warm_start(cfg, x0)
    elif cfg.kind == "drunken":
        goal = (float(c.goal[0]), float(c.goal[1]))
        run = GoalCost(goal, c.goal_weight, c.goal_delta, c.speed_weight)
        term = GoalCost(goal, c.terminal_weight, c.goal_delta)
        pi_cost = CostModel(run, term, lambda x, aux=None: obstacle_violation(x, obstacles))
        penalty = SmoothObstaclePenalty(obstacles, cfg.ilqg.penalty_scale, cfg.ilqg.penalty_weight)
        ilqg_cost = CostModel(SumCost(run, penalty), term)
        ilqg_horizon = cfg.ilqg.horizon_s or cfg.duration_s
        log_cost = run
    else:
        hp = _hp_params(cfg)
        cat_mouse = cfg.kind == "cat_mouse"
        task = HoldingPatternTask(hp, c.agent_radius, cat_mouse=cat_mouse)
        if cat_mouse:
            mouse = MouseModel(c.v_max_mouse, cfg.sim.mouse_escape)
            pi_cost = task.cost_model(mouse if cfg.sim.mouse_in_rollouts else None)
        else:
            pi_cost = task.cost_model()
            ilqg_cost = CostModel(HoldingPatternCost(hp))
        log_cost = task.running

    ilqg_config = None
    if ilqg_cost is not None:
        ilqg_config = IlqgConfig(
            horizon_s=ilqg_horizon,
            dt_s=cfg.pi.dt_s,
            control_weight=_control_weight(cfg),
            max_iters=cfg.ilqg.max_iters,
            step_size=cfg.ilqg.step_size,
            convergence_tol=cfg.ilqg.convergence_tol,
            mode=cfg.ilqg.mode,
        )

    d = cfg.disturbance
    plant = Plant(
        dt=cfg.dynamics.plant_dt_s,
        replan_period=pc.replan_period,
        duration_s=cfg.duration_s,
        low_level=LowLevelModel(cfg.low_level.tau_v, cfg.low_level.u_max),
        disturbance=DisturbanceModel(tuple(d.wind_mean), d.ou_theta, d.ou_sigma, d.drag) if d.enabled else None,
        obstacles=obstacles if (c.obstacles or m > 1) else None,
        state_cost=lambda x, aux=None: log_cost(x, aux),
        mouse=mouse,
        mouse_start=tuple(cfg.sim.mouse_start) if mouse is not None else None,
        capture_radius=cfg.sim.capture_radius,
        terminate_on_capture=cfg.sim.terminate_on_capture,
        goal=(float(c.goal[0]), float(c.goal[1])) if (cfg.kind == "drunken" and c.goal) else None,
        goal_radius=cfg.sim.goal_radius,
        actuation_sigma=cfg.pi.sigma_u if cfg.sim.actuation_noise else 0.0,
        seed=seed,
    )
    return Scenario(cfg, seed, x0, pc, pi_cost, ilqg_config, ilqg_cost, plant, warm, hp)


# The iLQG plan is certainty equivalent: identical for every seed that
# shares the start state, cost and solver settings.  Cache it per process.
_PLAN_CACHE: dict[tuple, IlqgSolution] = {}


def _plan_key(sc: Scenario) -> tuple:
    d = sc.cfg.to_dict()
    relevant = {k: d[k] for k in ("kind", "agents", "cost", "ilqg", "pi")}
    return (repr(sorted(relevant.items())), sc.x0.tobytes())


def make_controller(sc: Scenario, name: str):
    if name == "pi":
        return PiController(sc.pi_config, sc.pi_cost, warm=sc.warm)
    if sc.ilqg_cost is None or sc.ilqg_config is None:
        raise ValueError(f"iLQG is not available for scenario kind {sc.cfg.kind!r}")
    ctrl = IlqgController(sc.ilqg_cost, sc.ilqg_config, replan_hz=sc.cfg.pi.replan_hz, resolve=sc.cfg.ilqg.resolve)
    if not sc.cfg.ilqg.resolve:
        key = _plan_key(sc)
        if key not in _PLAN_CACHE:
            _PLAN_CACHE[key] = ilqg_solve(sc.x0, sc.ilqg_cost, sc.ilqg_config)
        ctrl.solution = _PLAN_CACHE[key]
    return ctrl


# ---------------------------------------------------------------------------
# Metrics


def route_choice(log: EpisodeLog, gate: list[float] | None) -> str:
    """``gap`` or ``around`` by where agent 0 first crosses the gate line ``x = gate[0]``.

    The gap is the interval ``gate[1] <= y <= gate[2]``; ``none`` if the
    agent never reaches the line.
    """
    if gate is None:
        return ""
    xs = np.concatenate([log.x[:, 0], log.final_x[None, 0]]) if log.final_x is not None else log.x[:, 0]
    idx = np.nonzero(xs[:, 0] >= gate[0])[0]
    if len(idx) == 0:
        return "none"
    y = xs[idx[0], 1]
    return "gap" if gate[1] <= y <= gate[2] else "around"


def _nearest_cat_distance(log: EpisodeLog) -> Array:
    rel = log.x[:, :, :2] - log.mouse[:, None, :]
    return np.min(np.sqrt(np.sum(rel**2, axis=-1)), axis=1)


def episode_metrics(sc: Scenario, log: EpisodeLog) -> dict[str, Any]:
    """Flat scenario-specific metrics for the result table."""
    cfg = sc.cfg
    out: dict[str, Any] = {}
    if cfg.kind == "drunken":
        out["route"] = route_choice(log, cfg.sim.route_gate)
        out["goal_reached"] = bool(log.summary["goal_reached"])
    elif cfg.kind == "holding_pattern" and cfg.agents.M >= 2 and len(log.t):
        fm = formation_metrics(log, sc.hp_params, cfg.sim.formation_window_s)
        out.update({k: fm[k] for k in ("radial_error", "gap_cv", "mean_speed", "single_rotation")})
        t_end = float(log.t[-1])
        out["cost_5s"] = smoothed(log.cost, log.t, min(5.0, t_end))
        out["cost_end"] = smoothed(log.cost, log.t, t_end)
    elif cfg.kind == "cat_mouse" and len(log.t):
        near = _nearest_cat_distance(log)
        sel = log.t >= log.t[-1] - 5.0 + 1e-9
        out["captured"] = bool(log.summary["captured"])
        out["capture_time"] = float(log.summary["capture_time"])
        out["end_nearest_distance"] = float(np.mean(near[sel]))
        post_cv = math.nan
        if log.summary["captured"]:
            after = log.t >= log.summary["capture_time"] - 1e-9
            after &= log.t >= log.t[-1] - cfg.sim.formation_window_s + 1e-9
            if np.any(after) and cfg.agents.M >= 2:
                rel = log.x[after, :, :2] - log.mouse[after, None, :]
                post_cv = float(np.mean(_gap_cv(np.arctan2(rel[..., 1], rel[..., 0]))))
        out["post_capture_gap_cv"] = post_cv
    return out


def run_episode(cfg: ScenarioConfig, controller: str, seed: int) -> tuple[EpisodeLog, dict[str, Any]]:
    """Run one episode; returns the log and its result-table row."""
    t0 = time.perf_counter()
    try:
        sc = build(cfg, seed)
        ctrl = make_controller(sc, controller)
    except Exception as exc:  # noqa: BLE001 - setup or planning failure aborts the episode, suite continues
        log = EpisodeLog(
            t=np.zeros(0), x=np.zeros((0, cfg.agents.M, 4)), v_cmd=np.zeros((0, cfg.agents.M, 2)),
            u=np.zeros((0, cfg.agents.M, 2)), ess=np.zeros(0), cost=np.zeros(0),
            events=[(0, f"aborted:{type(exc).__name__}")],
        )
        log.summary.update(status="aborted", crash=False, captured=False, capture_time=math.nan,
                           goal_reached=False, steps=0, total_cost=math.nan, mean_ess=math.nan)
    else:
        log = run_closed_loop(sc.x0, ctrl, sc.plant)
    row: dict[str, Any] = {
        "scenario": cfg.name,
        "controller": controller,
        "seed": seed,
        "status": log.summary["status"],
        "crash": bool(log.summary["crash"]),
        "total_cost": float(log.summary["total_cost"]),
        "mean_ess": float(log.summary["mean_ess"]),
        "steps": int(log.summary["steps"]),
    }
    if log.summary["status"] == "ok":
        row.update(episode_metrics(sc, log))
    row["wall_clock"] = time.perf_counter() - t0
    return log, row
