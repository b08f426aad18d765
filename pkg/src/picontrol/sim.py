"""Closed-loop plant simulation and episode bookkeeping.

The plant is the planner's double integrator run through a low-level
velocity-tracking layer (first-order lag, saturated acceleration) and pushed
around by wind.  Wind is an Ornstein-Uhlenbeck velocity process per agent
that acts on the vehicle as linear drag, ``dv += drag * (wind - v) dt``.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .costs import HoldingPatternParams, obstacle_violation, ObstacleSet
from .dynamics import ContractViolation

Array = NDArray[np.float64]

LOG_COLUMNS = ["t", "agent", "p_E", "p_N", "v_E", "v_N", "cmd_vE", "cmd_vN", "ess", "cost", "event"]


@dataclass(frozen=True)
class DisturbanceModel:
    wind_mean: tuple[float, float] = (0.0, 0.0)
    ou_theta: float = 1.0
    ou_sigma: float = 0.0
    drag: float = 0.5

    def __post_init__(self) -> None:
        if self.ou_theta < 0 or self.ou_sigma < 0 or self.drag < 0:
            raise ContractViolation("ou_theta, ou_sigma and drag must be non-negative")

    def advance(self, d: Array, dt: float, rng: np.random.Generator | None) -> Array:
        """Exact OU transition over ``dt``."""
        mean = np.asarray(self.wind_mean, dtype=np.float64)
        if self.ou_theta > 0:
            decay = math.exp(-self.ou_theta * dt)
            std = self.ou_sigma * math.sqrt((1 - decay * decay) / (2 * self.ou_theta))
        else:
            decay, std = 1.0, self.ou_sigma * math.sqrt(dt)
        out = mean + (d - mean) * decay
        if std > 0:
            out = out + std * rng.standard_normal(d.shape)
        return out

    def stationary_std(self) -> float:
        return self.ou_sigma / math.sqrt(2 * self.ou_theta) if self.ou_theta > 0 else math.inf


@dataclass(frozen=True)
class LowLevelModel:
    tau_v: float = 0.0
    u_max: float = 5.0

    def __post_init__(self) -> None:
        if self.tau_v < 0:
            raise ContractViolation("tau_v must be non-negative")
        if not self.u_max > 0:
            raise ContractViolation("u_max must be positive")


@dataclass
class MouseState:
    p_mouse: Array
    v_mouse: Array = field(default_factory=lambda: np.zeros(2))


def mouse_policy(
    p_mouse: ArrayLike, cat_positions: ArrayLike, v_max_mouse: float, escape: bool = True
) -> Array:
    """Mouse velocity: full speed along the inverse-square-weighted direction away from the cats.

    Works on batches: ``p_mouse`` ``(..., 2)`` and ``cat_positions`` ``(..., M, 2)``.
    ``escape=False`` uses the literal printed sign (towards the cats).  A cat
    exactly on the mouse, or a net direction below 1e-9, gives zero velocity.
    """
    pm = np.asarray(p_mouse, dtype=np.float64)
    cats = np.asarray(cat_positions, dtype=np.float64)
    diff = pm[..., None, :] - cats
    if not escape:
        diff = -diff
    d2 = np.sum(diff * diff, axis=-1)
    caught = np.any(d2 == 0.0, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.sum(diff / np.where(d2 == 0.0, 1.0, d2)[..., None], axis=-2)
    norm = np.sqrt(np.sum(v * v, axis=-1))
    still = caught | (norm < 1e-9)
    out = v_max_mouse * v / np.where(still, 1.0, norm)[..., None]
    return np.where(still[..., None], 0.0, out)


@dataclass(frozen=True)
class MouseModel:
    """The mouse as an autonomous process inside planner rollouts."""

    v_max_mouse: float
    escape: bool = True

    def step(self, x: Array, aux: Array, dt: float) -> Array:
        return aux + dt * mouse_policy(aux, x[..., :2], self.v_max_mouse, self.escape)


def plant_step(
    x: ArrayLike,
    v_cmd: ArrayLike,
    low_level: LowLevelModel,
    disturbance: DisturbanceModel | None,
    wind: ArrayLike,
    dt: float,
    rng: np.random.Generator | None = None,
    actuation_sigma: float = 0.0,
) -> tuple[Array, Array]:
    """Advance the plant one step; returns ``(x', wind')``.

    ``actuation_sigma`` adds Brownian velocity increments of std
    ``actuation_sigma * sqrt(dt)``, the execution counterpart of planner noise.
    """
    if not dt > 0:
        raise ContractViolation("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    v = x[:, 2:]
    v_cmd = np.asarray(v_cmd, dtype=np.float64)
    if not np.all(np.isfinite(v_cmd)):
        raise ContractViolation("non-finite velocity command")
    a = (v_cmd - v) / max(low_level.tau_v, dt)
    mag = np.sqrt(np.sum(a * a, axis=1, keepdims=True))
    a = np.where(mag > low_level.u_max, a * (low_level.u_max / np.where(mag > 0, mag, 1.0)), a)
    wind = np.asarray(wind, dtype=np.float64)
    out = np.empty_like(x)
    out[:, :2] = x[:, :2] + v * dt
    if disturbance is None:
        out[:, 2:] = v + a * dt
        wind_next = wind
    else:
        wind_next = disturbance.advance(wind, dt, rng)
        out[:, 2:] = v + a * dt + disturbance.drag * (wind_next - v) * dt
    if actuation_sigma > 0:
        out[:, 2:] += actuation_sigma * math.sqrt(dt) * rng.standard_normal(v.shape)
    if not np.all(np.isfinite(out)):
        raise ContractViolation("non-finite plant state")
    return out, wind_next


# ---------------------------------------------------------------------------
# Episodes


class Controller(Protocol):
    def act(self, k: int, x: Array, aux: Array | None, rng: np.random.Generator) -> tuple[Array, dict]: ...


@dataclass
class Plant:
    """Everything the closed loop needs besides the controller."""

    dt: float
    replan_period: float
    duration_s: float
    low_level: LowLevelModel = field(default_factory=LowLevelModel)
    disturbance: DisturbanceModel | None = None
    obstacles: ObstacleSet | None = None
    state_cost: Callable[[Array, Array | None], Array] | None = None
    mouse: MouseModel | None = None
    mouse_start: tuple[float, float] | None = None
    capture_radius: float = 1.0
    terminate_on_capture: bool = True
    goal: tuple[float, float] | None = None
    goal_radius: float = 0.5
    actuation_sigma: float = 0.0
    seed: int = 0

    @property
    def substeps(self) -> int:
        return max(1, int(round(self.replan_period / self.dt)))


@dataclass
class EpisodeLog:
    t: Array
    x: Array  # (T, M, 4)
    v_cmd: Array  # (T, M, 2)
    u: Array  # (T, M, 2) applied planner accelerations
    ess: Array  # (T,) NaN for controllers without ESS
    cost: Array  # (T,) running state cost at each record
    mouse: Array | None = None  # (T, 2)
    events: list[tuple[int, str]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    final_x: Array | None = None  # plant state after the last step
    final_mouse: Array | None = None

    @property
    def M(self) -> int:
        return self.x.shape[1]

    def event_names(self) -> list[str]:
        return [e for _, e in self.events]

    def write_csv(self, path: str | Path) -> None:
        ev = {}
        for i, e in self.events:
            ev.setdefault(i, []).append(e)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for i in range(len(self.t)):
                tag = ";".join(ev.get(i, []))
                for a in range(self.M):
                    w.writerow([
                        repr(float(self.t[i])), a, *map(lambda z: repr(float(z)), self.x[i, a]),
                        repr(float(self.v_cmd[i, a, 0])), repr(float(self.v_cmd[i, a, 1])),
                        repr(float(self.ess[i])), repr(float(self.cost[i])), tag,
                    ])
                if self.mouse is not None:
                    vm = self.mouse[i + 1] - self.mouse[i] if i + 1 < len(self.mouse) else np.zeros(2)
                    dt = self.t[1] - self.t[0] if len(self.t) > 1 else 1.0
                    w.writerow([
                        repr(float(self.t[i])), -1, repr(float(self.mouse[i, 0])), repr(float(self.mouse[i, 1])),
                        repr(float(vm[0] / dt)), repr(float(vm[1] / dt)), "", "", "", "", tag,
                    ])

    def write_summary(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for k, v in self.summary.items():
                fh.write(f"{k}: {v}\n")


def read_log_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_closed_loop(
    x0: ArrayLike,
    controller: Controller,
    plant: Plant,
    on_step: Callable[[int, Array], str | None] | None = None,
) -> EpisodeLog:
    """Alternate controller replans with plant steps until the episode ends.

    Ends at ``duration_s``, on a crash, on reaching the goal, or on capture
    when ``terminate_on_capture`` is set.  A controller exception aborts the
    episode and keeps the partial log.
    """
    ss = np.random.SeedSequence(plant.seed)
    plant_rng = np.random.default_rng(ss.spawn(1)[0])
    x = np.array(x0, dtype=np.float64)
    m = x.shape[0]
    wind = np.broadcast_to(
        np.asarray(plant.disturbance.wind_mean if plant.disturbance else (0.0, 0.0), dtype=np.float64), (m, 2)
    ).copy()
    mouse = None if plant.mouse is None else np.array(plant.mouse_start, dtype=np.float64)
    n_steps = int(round(plant.duration_s / plant.dt))
    n_sub = plant.substeps

    ts, xs, cmds, us, esss, costs, mice = [], [], [], [], [], [], []
    events: list[tuple[int, str]] = []
    status = "ok"
    crashed = captured = reached = False
    capture_time = math.nan
    v_cmd = x[:, 2:].copy()
    u = np.zeros((m, 2))
    ess = math.nan
    i = 0
    while i < n_steps:
        if i % n_sub == 0:
            k = i // n_sub
            rng_k = np.random.Generator(np.random.SFC64(np.random.SeedSequence(plant.seed, spawn_key=(7, k))))
            try:
                v_cmd, info = controller.act(k, x, mouse, rng_k)
            except Exception as exc:  # noqa: BLE001 - any controller failure aborts the episode
                status = "aborted"
                events.append((max(len(ts) - 1, 0), f"aborted:{type(exc).__name__}"))
                break
            u = info.get("u", np.zeros((m, 2)))
            ess = info.get("ess", math.nan)
            if info.get("event"):
                events.append((len(ts), info["event"]))
        ts.append(i * plant.dt)
        xs.append(x.copy())
        cmds.append(np.array(v_cmd, dtype=np.float64))
        us.append(np.array(u, dtype=np.float64))
        esss.append(ess)
        costs.append(float(plant.state_cost(x, mouse)) if plant.state_cost else 0.0)
        if mouse is not None:
            mice.append(mouse.copy())
            mouse = mouse + plant.dt * mouse_policy(mouse, x[:, :2], plant.mouse.v_max_mouse, plant.mouse.escape)
        x, wind = plant_step(
            x, v_cmd, plant.low_level, plant.disturbance, wind, plant.dt, plant_rng, plant.actuation_sigma
        )
        i += 1
        idx = len(ts) - 1
        if plant.obstacles is not None and bool(obstacle_violation(x, plant.obstacles)):
            crashed = True
            events.append((idx, "crash"))
            break
        if mouse is not None and not captured:
            near = np.min(np.sqrt(np.sum((x[:, :2] - mouse) ** 2, axis=1)))
            if near <= plant.capture_radius:
                captured = True
                capture_time = i * plant.dt
                events.append((idx, "captured"))
                if plant.terminate_on_capture:
                    break
        if plant.goal is not None and np.all(np.linalg.norm(x[:, :2] - np.asarray(plant.goal), axis=1) <= plant.goal_radius):
            reached = True
            events.append((idx, "goal"))
            break
        if on_step is not None:
            tag = on_step(idx, x)
            if tag:
                events.append((idx, tag))

    log = EpisodeLog(
        t=np.array(ts),
        x=np.array(xs).reshape(-1, m, 4),
        v_cmd=np.array(cmds).reshape(-1, m, 2),
        u=np.array(us).reshape(-1, m, 2),
        ess=np.array(esss, dtype=np.float64),
        cost=np.array(costs),
        mouse=None if plant.mouse is None else np.array(mice).reshape(-1, 2),
        events=events,
        final_x=x,
        final_mouse=mouse,
    )
    log.summary.update(
        status=status,
        crash=crashed,
        captured=captured,
        capture_time=capture_time,
        goal_reached=reached,
        steps=len(ts),
        total_cost=float(np.sum(log.cost) * plant.dt),
        mean_ess=float(np.nanmean(log.ess)) if np.any(np.isfinite(log.ess)) else math.nan,
    )
    return log


# ---------------------------------------------------------------------------
# Metrics


def _gap_cv(angles: Array) -> Array:
    """Coefficient of variation of adjacent angular gaps, per row of ``(T, M)``."""
    a = np.sort(np.mod(angles, 2 * np.pi), axis=1)
    gaps = np.diff(np.concatenate([a, a[:, :1] + 2 * np.pi], axis=1), axis=1)
    return np.std(gaps, axis=1) / np.mean(gaps, axis=1)


def formation_metrics(
    log: EpisodeLog,
    params: HoldingPatternParams | None = None,
    window_s: float = 20.0,
    center: Array | None = None,
) -> dict[str, float]:
    """Formation statistics over the last ``window_s`` seconds of ``log``.

    ``center`` is ``(T, 2)`` (e.g. the mouse track); the origin by default.
    Radial error is only reported when ``params`` gives the target radius.
    """
    if log.M < 2:
        raise ContractViolation("formation metrics need at least two agents")
    t = log.t
    sel = t >= t[-1] - window_s + 1e-9
    x = log.x[sel]
    c = np.zeros((x.shape[0], 2)) if center is None else np.asarray(center)[sel]
    rel = x[:, :, :2] - c[:, None, :]
    vel = x[:, :, 2:]
    if center is not None and len(c) > 1:
        dt = t[1] - t[0]
        cv = np.gradient(c, dt, axis=0)
        vel = vel - cv[:, None, :]
    radius = np.sqrt(np.sum(rel**2, axis=-1))
    angles = np.arctan2(rel[..., 1], rel[..., 0])
    omega = (rel[..., 0] * vel[..., 1] - rel[..., 1] * vel[..., 0]) / np.maximum(radius**2, 1e-12)
    signs = np.sign(omega)
    direction = 1.0 if np.sum(signs) >= 0 else -1.0
    per_agent = np.sign(np.mean(omega, axis=0))
    out = {
        "mean_radius": float(np.mean(radius)),
        "gap_cv": float(np.mean(_gap_cv(angles))),
        "mean_speed": float(np.mean(np.sqrt(np.sum(x[:, :, 2:] ** 2, axis=-1)))),
        "rotation_direction": direction,
        "rotation_consistency": float(np.mean(signs == direction)),
        "single_rotation": bool(np.all(per_agent == direction)),
    }
    if params is not None:
        out["radial_error"] = float(np.mean(np.abs(radius - params.d)))
    return out


def smoothed(values: Array, t: Array, at: float, window_s: float = 5.0) -> float:
    """Mean of ``values`` over the trailing window ``(at - window_s, at]``."""
    sel = (t > at - window_s + 1e-9) & (t <= at + 1e-9)
    return float(np.mean(values[sel]))
