"""Scenario files: a strict YAML schema with documented defaults.

A scenario file holds one experiment: the scenario kind, the agents, the
parameter blocks of every component, the seed list, and an optional grid of
parameter points.  Each grid point overrides dotted keys, e.g.
``{"pi.sigma_u": 1.0}``.  Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

Kind = Literal["drunken", "holding_pattern", "cat_mouse", "lq_oracle"]
ControllerName = Literal["pi", "ilqg"]


class ConfigError(ValueError):
    """A scenario file could not be parsed or failed validation."""


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class AgentsBlock(_Block):
    M: int = Field(1, ge=1)
    init: Literal["explicit", "random"] = "random"
    positions: Optional[list[list[float]]] = None
    velocities: Optional[list[list[float]]] = None
    spawn_radius: float = Field(10.0, gt=0)
    min_separation: float = Field(2.0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> AgentsBlock:
        if self.init == "explicit":
            if self.positions is None or len(self.positions) != self.M:
                raise ValueError(f"positions must list M={self.M} points for explicit init")
            if self.velocities is not None and len(self.velocities) != self.M:
                raise ValueError(f"velocities must list M={self.M} vectors")
        return self


class DynamicsBlock(_Block):
    plant_dt_s: float = Field(1.0 / 15.0, gt=0)


class CostBlock(_Block):
    # holding pattern / cat and mouse
    v_min: float = 1.0
    v_max: float = 3.0
    d: float = 7.0
    C_hit: float = Field(20.0, ge=0)
    arena: Literal["ring", "boundary"] = "ring"
    v_max_mouse: float = Field(3.0, gt=0)
    # obstacles and goal (drunken)
    obstacles: list[list[list[float]]] = Field(default_factory=list)
    agent_radius: float = Field(0.5, ge=0)
    goal: Optional[list[float]] = None
    goal_weight: float = Field(1.0, ge=0)
    goal_delta: float = Field(1.0, gt=0)
    terminal_weight: float = Field(0.0, ge=0)
    speed_weight: float = Field(0.0, ge=0)
    # lq_oracle: diagonal weights per agent component (p_E, p_N, v_E, v_N)
    q_diag: list[float] = Field(default_factory=lambda: [1.0, 1.0, 0.2, 0.2])
    q_terminal_diag: list[float] = Field(default_factory=lambda: [5.0, 5.0, 1.0, 1.0])

    @model_validator(mode="after")
    def _check(self) -> CostBlock:
        if not self.v_min < self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if not self.d > 0:
            raise ValueError("d must be positive")
        for i, box in enumerate(self.obstacles):
            if len(box) != 2 or any(len(c) != 2 for c in box):
                raise ValueError(f"obstacles[{i}] must be [[x_min, y_min], [x_max, y_max]]")
            if not (box[1][0] > box[0][0] and box[1][1] > box[0][1]):
                raise ValueError(f"obstacles[{i}] must have positive area")
        if len(self.q_diag) != 4 or len(self.q_terminal_diag) != 4:
            raise ValueError("q_diag and q_terminal_diag need 4 entries")
        return self


class DisturbanceBlock(_Block):
    enabled: bool = False
    wind_mean: list[float] = Field(default_factory=lambda: [0.0, 0.0])
    ou_theta: float = Field(1.0, ge=0)
    ou_sigma: float = Field(0.0, ge=0)
    drag: float = Field(0.5, ge=0)


class LowLevelBlock(_Block):
    tau_v: float = Field(0.0, ge=0)
    u_max: float = Field(5.0, gt=0)


class PiBlock(_Block):
    n_samples: int = Field(1000, ge=1)
    horizon_s: float = Field(1.0, gt=0)
    dt_s: float = Field(1.0 / 15.0, gt=0)
    lam: float = Field(1.0, gt=0, alias="lambda")
    sigma_u: float = Field(1.0, gt=0)
    replan_hz: float = Field(15.0, gt=0)
    warm_start: Literal["zero", "riccati"] = "zero"

    @model_validator(mode="after")
    def _check(self) -> PiBlock:
        if self.horizon_s < self.dt_s * (1 - 1e-9):
            raise ValueError("horizon_s must be at least dt_s")
        steps = self.horizon_s / self.dt_s
        if abs(steps - round(steps)) > 1e-6:
            raise ValueError(f"horizon_s ({self.horizon_s}) must be a whole number of dt_s ({self.dt_s}) steps")
        if 1.0 / self.replan_hz < self.dt_s * (1 - 1e-9):
            raise ValueError("replan period (1/replan_hz) must be at least dt_s")
        return self


class IlqgBlock(_Block):
    max_iters: int = Field(1000, ge=1)
    step_size: float = Field(0.005, gt=0, le=1)
    convergence_tol: float = Field(1e-7, ge=0)
    mode: Literal["blend", "linesearch"] = "blend"
    penalty_scale: float = Field(0.5, gt=0)
    penalty_weight: float = Field(10.0, ge=0)
    control_weight: Optional[float] = Field(None, gt=0)
    horizon_s: Optional[float] = Field(None, gt=0)
    resolve: bool = False


class SimBlock(_Block):
    capture_radius: float = Field(1.0, gt=0)
    terminate_on_capture: bool = True
    mouse_start: list[float] = Field(default_factory=lambda: [0.0, 0.0])
    mouse_escape: bool = True
    mouse_in_rollouts: bool = True
    goal_radius: float = Field(0.5, gt=0)
    formation_window_s: float = Field(20.0, gt=0)
    # plant adds Brownian velocity noise at the planner's sigma_u
    actuation_noise: bool = False
    # [x, y_low, y_high]: route is "gap" if the first crossing of x lies in [y_low, y_high]
    route_gate: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check(self) -> SimBlock:
        if self.route_gate is not None and (len(self.route_gate) != 3 or self.route_gate[1] > self.route_gate[2]):
            raise ValueError("route_gate must be [x, y_low, y_high] with y_low <= y_high")
        return self


class GridPoint(_Block):
    label: str
    set: dict[str, Any] = Field(default_factory=dict)


class ScenarioConfig(_Block):
    name: str
    kind: Kind
    duration_s: float = Field(gt=0)
    seeds: list[int] = Field(min_length=1)
    controllers: list[ControllerName] = Field(default_factory=lambda: ["pi"])
    agents: AgentsBlock = Field(default_factory=AgentsBlock)
    dynamics: DynamicsBlock = Field(default_factory=DynamicsBlock)
    cost: CostBlock = Field(default_factory=CostBlock)
    disturbance: DisturbanceBlock = Field(default_factory=DisturbanceBlock)
    low_level: LowLevelBlock = Field(default_factory=LowLevelBlock)
    pi: PiBlock = Field(default_factory=PiBlock)
    ilqg: IlqgBlock = Field(default_factory=IlqgBlock)
    sim: SimBlock = Field(default_factory=SimBlock)
    grid: list[GridPoint] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> ScenarioConfig:
        if self.kind == "drunken":
            if self.cost.goal is None or len(self.cost.goal) != 2:
                raise ValueError("drunken scenarios need cost.goal = [x, y]")
            if not self.cost.obstacles:
                raise ValueError("drunken scenarios need cost.obstacles")
        if self.kind == "cat_mouse" and "ilqg" in self.controllers:
            raise ValueError("controllers: iLQG does not support the cat_mouse scenario")
        labels = [g.label for g in self.grid]
        if len(set(labels)) != len(labels):
            raise ValueError("grid labels must be unique")
        return self

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def points(self) -> list[tuple[str, ScenarioConfig]]:
        """The grid expanded into concrete configs (just the base one without a grid)."""
        if not self.grid:
            return [("base", self)]
        return [(g.label, apply_overrides(self, g.set)) for g in self.grid]

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def apply_overrides(cfg: ScenarioConfig, overrides: dict[str, Any]) -> ScenarioConfig:
    data = cfg.to_dict()
    data["grid"] = []
    for dotted, value in overrides.items():
        node = data
        *path, leaf = dotted.split(".")
        for key in path:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"grid override {dotted!r}: no block {key!r}")
            node = node[key]
        if leaf not in node:
            raise ConfigError(f"grid override {dotted!r}: unknown key {leaf!r}")
        node[leaf] = copy.deepcopy(value)
    return _validate(data)


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def _validate(data: Any) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("scenario file must be a mapping at the top level")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigError(f"parse error at {where}: {getattr(err, 'problem', err)}") from None
    return _validate(data)


def load_scenario(path: str | Path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text())


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
