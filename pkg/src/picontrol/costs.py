"""State costs, control cost and hard constraints.

Every state cost here is vectorized: it takes a batched joint state of shape
``(..., M, 4)`` (and, for the cat-and-mouse task, a batched mouse position
``(..., 2)``) and returns an array of shape ``(...)``.  Terms that can also
supply analytic derivatives implement ``derivs(x)`` returning the gradient
``(..., n)`` and Hessian ``(..., n, n)`` with respect to the flattened state,
``n = 4 M``.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dynamics import ContractViolation, JointState

Array = NDArray[np.float64]


def _as_x(state: JointState | ArrayLike) -> Array:
    return state.x if isinstance(state, JointState) else np.asarray(state, dtype=np.float64)


@dataclass(frozen=True)
class ControlCostSpec:
    """Temperature and control cost tied together by ``Sigma_u = lambda R^-1``.

    ``R`` is never set on its own: it is ``lam / sigma_u**2`` per axis.
    """

    lam: float
    sigma_u: float

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ContractViolation("lambda must be positive")
        if not self.sigma_u > 0:
            raise ContractViolation("sigma_u must be positive to define R")

    @property
    def r(self) -> float:
        return self.lam / self.sigma_u**2

    def R(self, m: int = 2) -> Array:
        return self.r * np.eye(m)


class StateCost(Protocol):
    def __call__(self, x: Array, aux: Array | None = None) -> Array: ...


def _zero_cost(x: Array, aux: Array | None = None) -> Array:
    return np.zeros(x.shape[:-2])


def _never(x: Array, aux: Array | None = None) -> NDArray[np.bool_]:
    return np.zeros(x.shape[:-2], dtype=bool)


class Exogenous(Protocol):
    """An autonomous process the cost depends on (e.g. the mouse)."""

    def step(self, x: Array, aux: Array, dt: float) -> Array: ...


@dataclass(frozen=True)
class CostModel:
    running_cost: Callable[..., Array] = _zero_cost
    terminal_cost: Callable[..., Array] = _zero_cost
    hard_violation: Callable[..., NDArray[np.bool_]] = _never
    exogenous: Exogenous | None = None
    # optional fused ``(running_cost, hard_violation)`` evaluation for rollouts
    evaluate: Callable[..., tuple[Array, NDArray[np.bool_]]] | None = None

    def running_and_violation(self, x: Array, aux: Array | None = None) -> tuple[Array, NDArray[np.bool_]]:
        if self.evaluate is not None:
            return self.evaluate(x, aux)
        return self.running_cost(x, aux), np.asarray(self.hard_violation(x, aux), dtype=bool)

    def running(self, state: JointState | ArrayLike, aux: ArrayLike | None = None) -> Array:
        return self.running_cost(_as_x(state), aux)

    def terminal(self, state: JointState | ArrayLike, aux: ArrayLike | None = None) -> Array:
        return self.terminal_cost(_as_x(state), aux)

    def violated(self, state: JointState | ArrayLike, aux: ArrayLike | None = None) -> NDArray[np.bool_]:
        return self.hard_violation(_as_x(state), aux)


# ---------------------------------------------------------------------------
# Composable cost terms


class SumCost:
    """Sum of cost terms; has ``derivs`` only if every term does."""

    def __init__(self, *terms: Any) -> None:
        self.terms = terms
        if all(hasattr(t, "derivs") for t in terms):
            self.derivs = self._derivs

    def __call__(self, x: Array, aux: Array | None = None) -> Array:
        out = np.zeros(x.shape[:-2])
        for t in self.terms:
            out = out + t(x, aux)
        return out

    def _derivs(self, x: Array) -> tuple[Array, Array]:
        g_total = h_total = None
        for t in self.terms:
            g, h = t.derivs(x)
            g_total = g if g_total is None else g_total + g
            h_total = h if h_total is None else h_total + h
        return g_total, h_total


@dataclass(frozen=True)
class QuadraticCost:
    """``0.5 (x - x_ref)^T Q (x - x_ref)`` on the flattened joint state."""

    Q: Array
    x_ref: Array | None = None

    def _dx(self, x: Array) -> Array:
        flat = x.reshape(x.shape[:-2] + (-1,))
        return flat if self.x_ref is None else flat - np.asarray(self.x_ref).reshape(-1)

    def __call__(self, x: Array, aux: Array | None = None) -> Array:
        dx = self._dx(x)
        return 0.5 * np.einsum("...i,ij,...j->...", dx, self.Q, dx)

    def derivs(self, x: Array) -> tuple[Array, Array]:
        dx = self._dx(x)
        g = dx @ np.asarray(self.Q).T
        h = np.broadcast_to(self.Q, dx.shape[:-1] + self.Q.shape).copy()
        return g, h


@dataclass(frozen=True)
class GoalCost:
    """Smooth distance-to-goal ``weight * (sqrt(|p - g|^2 + delta^2) - delta)``.

    ``speed_weight`` adds ``speed_weight * |v|^2``.  Applied to every agent.
    """

    goal: tuple[float, float]
    weight: float
    delta: float = 1.0
    speed_weight: float = 0.0

    def __call__(self, x: Array, aux: Array | None = None) -> Array:
        dp = x[..., :2] - np.asarray(self.goal)
        rho = np.sqrt(np.sum(dp * dp, axis=-1) + self.delta**2)
        val = self.weight * (rho - self.delta)
        if self.speed_weight:
            val = val + self.speed_weight * np.sum(x[..., 2:] ** 2, axis=-1)
        return np.sum(val, axis=-1)

    def derivs(self, x: Array) -> tuple[Array, Array]:
        lead, m = x.shape[:-2], x.shape[-2]
        dp = x[..., :2] - np.asarray(self.goal)
        rho = np.sqrt(np.sum(dp * dp, axis=-1) + self.delta**2)[..., None]
        g = np.zeros(x.shape)
        g[..., :2] = self.weight * dp / rho
        g[..., 2:] = 2 * self.speed_weight * x[..., 2:]
        hb = np.zeros(lead + (m, 4, 4))
        hb[..., :2, :2] = (self.weight / rho[..., None]) * (
            np.eye(2) - dp[..., :, None] * dp[..., None, :] / rho[..., None] ** 2
        )
        hb[..., 2, 2] = hb[..., 3, 3] = 2 * self.speed_weight
        return g.reshape(lead + (-1,)), _block_diag(hb)


def _block_diag(blocks: Array) -> Array:
    lead, m, k = blocks.shape[:-3], blocks.shape[-3], blocks.shape[-1]
    out = np.zeros(lead + (m * k, m * k))
    for i in range(m):
        out[..., i * k:(i + 1) * k, i * k:(i + 1) * k] = blocks[..., i, :, :]
    return out


# ---------------------------------------------------------------------------
# Holding pattern and cat and mouse


@dataclass(frozen=True)
class HoldingPatternParams:
    """Parameters of the formation cost.

    ``arena`` selects the position term: ``"ring"`` penalizes the radial
    deviation ``exp(| |p| - d |)`` and pulls agents onto the circle of radius
    ``d``; ``"boundary"`` uses the one-sided ``exp(|p| - d)``, which is
    negligible well inside radius ``d`` and grows outside it.
    """

    v_min: float = 1.0
    v_max: float = 3.0
    d: float = 7.0
    c_hit: float = 20.0
    arena: str = "ring"

    def __post_init__(self) -> None:
        if not self.v_min < self.v_max:
            raise ContractViolation(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if not self.d > 0:
            raise ContractViolation("d must be positive")
        if not self.c_hit >= 0:
            raise ContractViolation("C_hit must be non-negative")
        if self.arena not in ("ring", "boundary"):
            raise ContractViolation(f"unknown arena term {self.arena!r}")


@dataclass(frozen=True)
class CatMouseParams:
    hp: HoldingPatternParams = field(default_factory=lambda: HoldingPatternParams(1.0, 4.0, 30.0, 20.0))
    v_max_mouse: float = 3.0

    def __post_init__(self) -> None:
        if not self.v_max_mouse > 0:
            raise ContractViolation("v_max_mouse must be positive")


def _pairs(m: int) -> tuple[NDArray[np.intp], NDArray[np.intp]]:
    return np.triu_indices(m, 1)


def pair_distances(pos: Array) -> Array:
    """Distances ``|p_i - p_j|`` for ``i < j``; shape ``(..., M (M-1) / 2)``."""
    i, j = _pairs(pos.shape[-2])
    d = pos[..., i, :] - pos[..., j, :]
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def _pair_terms(pos: Array, c_hit: float) -> tuple[Array, Array]:
    """``sum_{i<j} c_hit / |p_i - p_j|`` and the smallest pair distance.

    Loops over agents with slices instead of gathering index pairs, which
    keeps batched inputs in their memory layout.
    """
    m = pos.shape[-2]
    total = np.zeros(pos.shape[:-2])
    closest = np.full(pos.shape[:-2], np.inf)
    for i in range(m - 1):
        d = pos[..., i + 1:, :] - pos[..., i:i + 1, :]
        dist = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)
        if c_hit:
            with np.errstate(divide="ignore"):
                total = total + np.sum(c_hit / dist, axis=-1)
        closest = np.minimum(closest, np.min(dist, axis=-1))
    return total, closest


def _holding_pattern(x: Array, params: HoldingPatternParams) -> tuple[Array, Array]:
    speed = np.sqrt(x[..., 2] ** 2 + x[..., 3] ** 2)
    radius = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
    if params.arena == "ring":
        pos_term = np.exp(np.abs(radius - params.d))
    else:
        pos_term = np.exp(radius - params.d)
    es = np.exp(speed)
    per_agent = es * math.exp(-params.v_max) + math.exp(params.v_min) / es + pos_term
    pair, closest = _pair_terms(x[..., :2], params.c_hit)
    return np.sum(per_agent, axis=-1) + pair, closest


def holding_pattern_cost(state: JointState | ArrayLike, params: HoldingPatternParams) -> Array:
    """Formation cost rate: speed band, radius term and pairwise collision risk."""
    return _holding_pattern(_as_x(state), params)[0]


def _radial_derivs(z: Array, f1: Array, f2: Array) -> tuple[Array, Array]:
    """Gradient and Hessian of ``f(|z|)`` from ``f'`` and ``f''`` at ``|z|``, batched over ``(..., 2)``."""
    n = np.sqrt(z[..., 0] ** 2 + z[..., 1] ** 2)
    safe = np.maximum(n, 1e-12)
    u = z / safe[..., None]
    uu = u[..., :, None] * u[..., None, :]
    g = f1[..., None] * u
    h = f2[..., None, None] * uu + (f1 / safe)[..., None, None] * (np.eye(2) - uu)
    return g, h


@dataclass(frozen=True)
class HoldingPatternCost:
    """Formation cost with analytic first and second derivatives."""

    params: HoldingPatternParams

    def __call__(self, x: Array, aux: Array | None = None) -> Array:
        return holding_pattern_cost(x, self.params)

    def derivs(self, x: Array) -> tuple[Array, Array]:
        p = self.params
        lead, m = x.shape[:-2], x.shape[-2]
        g = np.zeros(x.shape)
        H = np.zeros(lead + (m, 4, m, 4))

        speed = np.sqrt(x[..., 2] ** 2 + x[..., 3] ** 2)
        up, down = np.exp(speed - p.v_max), np.exp(p.v_min - speed)
        gv, hv = _radial_derivs(x[..., 2:], up - down, up + down)

        radius = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
        if p.arena == "ring":
            e = np.exp(np.abs(radius - p.d))
            d1, d2 = np.sign(radius - p.d) * e, e
        else:
            d1 = d2 = np.exp(radius - p.d)
        gp, hp = _radial_derivs(x[..., :2], d1, d2)

        g[..., :2] = gp
        g[..., 2:] = gv
        for i in range(m):
            H[..., i, :2, i, :2] = hp[..., i, :, :]
            H[..., i, 2:, i, 2:] = hv[..., i, :, :]

        if p.c_hit:
            for i in range(m - 1):
                for j in range(i + 1, m):
                    delta = x[..., i, :2] - x[..., j, :2]
                    rho = np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2)
                    gd, hd = _radial_derivs(delta, -p.c_hit / rho**2, 2 * p.c_hit / rho**3)
                    g[..., i, :2] += gd
                    g[..., j, :2] -= gd
                    H[..., i, :2, i, :2] += hd
                    H[..., j, :2, j, :2] += hd
                    H[..., i, :2, j, :2] -= hd
                    H[..., j, :2, i, :2] -= hd
        return g.reshape(lead + (4 * m,)), H.reshape(lead + (4 * m, 4 * m))


def cat_mouse_cost(
    state: JointState | ArrayLike, mouse: ArrayLike, params: CatMouseParams
) -> Array:
    """Holding-pattern cost plus the summed cat-to-mouse distances."""
    x = _as_x(state)
    mouse = np.asarray(mouse, dtype=np.float64)
    d = x[..., :2] - mouse[..., None, :]
    return holding_pattern_cost(x, params.hp) + np.sum(np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2), axis=-1)


@dataclass(frozen=True)
class HoldingPatternTask:
    """Running cost and agent-collision constraint of the formation task.

    With ``cat_mouse`` set, the cost also sums the distances to the mouse,
    which is passed as ``aux``.
    """

    params: HoldingPatternParams
    agent_radius: float = 0.5
    cat_mouse: bool = False

    def running(self, x: Array, aux: Array | None = None) -> Array:
        return self.evaluate(x, aux)[0]

    def violation(self, x: Array, aux: Array | None = None) -> NDArray[np.bool_]:
        return self.evaluate(x, aux)[1]

    def evaluate(self, x: Array, aux: Array | None = None) -> tuple[Array, NDArray[np.bool_]]:
        cost, closest = _holding_pattern(x, self.params)
        if self.cat_mouse:
            d = x[..., :2] - np.asarray(aux)[..., None, :]
            cost = cost + np.sum(np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2), axis=-1)
        return cost, closest <= 2 * self.agent_radius

    def cost_model(self, exogenous: Exogenous | None = None) -> CostModel:
        return CostModel(self.running, _zero_cost, self.violation, exogenous, self.evaluate)


# ---------------------------------------------------------------------------
# Obstacles


@dataclass(frozen=True, eq=False)
class ObstacleSet:
    """Closed axis-aligned boxes ``(min_corner, max_corner)`` plus the agent disc radius."""

    boxes: Array = field(default_factory=lambda: np.zeros((0, 2, 2)))
    agent_radius: float = 0.5

    def __post_init__(self) -> None:
        b = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 2, 2)
        if np.any(b[:, 1] <= b[:, 0]):
            raise ContractViolation("boxes must have positive area (max_corner > min_corner)")
        if not self.agent_radius >= 0:
            raise ContractViolation("agent_radius must be non-negative")
        b.flags.writeable = False
        object.__setattr__(self, "boxes", b)

    @classmethod
    def from_corners(cls, corners: Sequence[Sequence[Sequence[float]]], agent_radius: float = 0.5) -> ObstacleSet:
        return cls(np.asarray(corners, dtype=np.float64).reshape(-1, 2, 2), agent_radius)


def _box_excess(pos: Array, boxes: Array) -> tuple[Array, Array]:
    """Per-axis excess ``max(lo - p, p - hi)`` with shape ``(..., M, K, 2)`` and its sign."""
    p = pos[..., None, :]
    lo, hi = boxes[:, 0], boxes[:, 1]
    below, above = lo - p, p - hi
    e = np.maximum(below, above)
    de = np.where(above >= below, 1.0, -1.0)
    return e, de


def box_signed_distance(pos: ArrayLike, boxes: ArrayLike) -> Array:
    """Signed distance of points ``(..., M, 2)`` to each box; negative inside."""
    e, _ = _box_excess(np.asarray(pos, dtype=np.float64), np.asarray(boxes, dtype=np.float64).reshape(-1, 2, 2))
    q = np.maximum(e, 0.0)
    outside = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2)
    inside = np.minimum(np.max(e, axis=-1), 0.0)
    return outside + inside


def obstacle_violation(state: JointState | ArrayLike, obstacles: ObstacleSet) -> NDArray[np.bool_]:
    """True where an agent disc touches a box or another agent (contact counts)."""
    x = _as_x(state)
    pos = x[..., :2]
    r = obstacles.agent_radius
    hit = np.zeros(x.shape[:-2], dtype=bool)
    if len(obstacles.boxes):
        e, _ = _box_excess(pos, obstacles.boxes)
        q = np.maximum(e, 0.0)
        hit |= np.any(q[..., 0] ** 2 + q[..., 1] ** 2 <= r * r, axis=(-1, -2))
    if x.shape[-2] > 1:
        hit |= _pair_terms(pos, 0.0)[1] <= 2 * r
    return hit


def agent_collision(state: JointState | ArrayLike, agent_radius: float) -> NDArray[np.bool_]:
    x = _as_x(state)
    if x.shape[-2] < 2:
        return np.zeros(x.shape[:-2], dtype=bool)
    return _pair_terms(x[..., :2], 0.0)[1] <= 2 * agent_radius


@dataclass(frozen=True)
class SmoothObstaclePenalty:
    """``weight * exp(-sd / scale)`` summed over agents and boxes.

    ``sd`` is the signed distance from the agent disc (centre distance minus
    ``agent_radius``) to the box, so contact costs exactly ``weight``.
    """

    obstacles: ObstacleSet
    scale: float
    weight: float

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ContractViolation("penalty scale must be positive")

    def __call__(self, x: Array, aux: Array | None = None) -> Array:
        if not len(self.obstacles.boxes):
            return np.zeros(x.shape[:-2])
        sd = box_signed_distance(x[..., :2], self.obstacles.boxes) - self.obstacles.agent_radius
        return self.weight * np.sum(np.exp(-sd / self.scale), axis=(-1, -2))

    def position_derivs(self, pos: Array) -> tuple[Array, Array]:
        """Gradient ``(..., M, 2)`` and per-agent Hessian ``(..., M, 2, 2)`` in position."""
        boxes = self.obstacles.boxes
        e, de = _box_excess(pos, boxes)
        q = np.maximum(e, 0.0)
        norm = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2)
        outside = norm > 0
        safe = np.where(outside, norm, 1.0)[..., None]
        n_out = q / safe * de
        axis = np.argmax(e, axis=-1)
        n_in = np.where(np.arange(2) == axis[..., None], de, 0.0)
        grad_sd = np.where(outside[..., None], n_out, n_in)
        both = np.all(q > 0, axis=-1)
        curv = (np.eye(2) - n_out[..., :, None] * n_out[..., None, :]) / safe[..., None]
        hess_sd = np.where((outside & both)[..., None, None], curv, 0.0)
        sd = np.where(outside, norm, np.max(e, axis=-1)) - self.obstacles.agent_radius
        f = self.weight * np.exp(-sd / self.scale)
        s = self.scale
        g = -(f / s)[..., None] * grad_sd
        h = (f / s**2)[..., None, None] * grad_sd[..., :, None] * grad_sd[..., None, :] - (f / s)[..., None, None] * hess_sd
        return g.sum(axis=-2), h.sum(axis=-3)

    def derivs(self, x: Array) -> tuple[Array, Array]:
        lead, m = x.shape[:-2], x.shape[-2]
        g = np.zeros(x.shape)
        hb = np.zeros(lead + (m, 4, 4))
        if len(self.obstacles.boxes):
            gp, hp = self.position_derivs(x[..., :2])
            g[..., :2] = gp
            hb[..., :2, :2] = hp
        return g.reshape(lead + (-1,)), _block_diag(hb)


def smooth_obstacle_penalty(
    state: JointState | ArrayLike, obstacles: ObstacleSet, scale: float, weight: float
) -> Array:
    return SmoothObstaclePenalty(obstacles, scale, weight)(_as_x(state))


# ---------------------------------------------------------------------------
# Path cost


def path_cost(
    trajectory: Sequence[JointState] | ArrayLike,
    controls: ArrayLike,
    spec: ControlCostSpec,
    model: CostModel,
    dt: float,
    noise: ArrayLike | None = None,
    aux: ArrayLike | None = None,
) -> float:
    """Cost-to-go ``r_T(x_T) + sum_t (r_t(x_t) + 0.5 u_t^T R u_t) dt``.

    Returns ``inf`` if any visited state violates a hard constraint.  When the
    stored noise increments are given, the importance-sampling correction
    ``sum_t u_t^T R dxi_t`` is added; that is the path cost the rollout
    weights are computed from.
    """
    if isinstance(trajectory, (list, tuple)) and trajectory and isinstance(trajectory[0], JointState):
        xs = np.stack([s.x for s in trajectory])
    else:
        xs = np.asarray(trajectory, dtype=np.float64)
    u = np.asarray(controls, dtype=np.float64)
    if xs.shape[0] != u.shape[0] + 1:
        raise ContractViolation(f"trajectory has {xs.shape[0]} states for {u.shape[0]} controls")
    aux_arr = None if aux is None else np.asarray(aux, dtype=np.float64)
    if np.any(model.hard_violation(xs, aux_arr)):
        return float("inf")
    run = model.running_cost(xs[:-1], None if aux_arr is None else aux_arr[:-1])
    term = model.terminal_cost(xs[-1], None if aux_arr is None else aux_arr[-1])
    total = float(term) + float(np.sum((run + 0.5 * spec.r * np.sum(u * u, axis=(-1, -2))) * dt))
    if noise is not None:
        total += float(spec.r * np.sum(u * np.asarray(noise, dtype=np.float64)))
    return total
