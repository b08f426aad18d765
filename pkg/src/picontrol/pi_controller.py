"""Sampling-based path-integral controller with importance controls.

One planning call draws N noisy rollouts around the current importance
control sequence, weights them by ``exp(-S_k / lambda)``, and moves the
controls by the weighted mean of the stored noise.  Rollouts that enter a
hard-constraint state are killed at that step and get weight exactly zero.

Noise for one planning call is drawn as a single ``(N, S, M, 2)`` block from
the caller's generator, rollout-major, so rollout ``k`` always reads row
``k`` no matter how the batch is split across workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .costs import ControlCostSpec, CostModel
from .dynamics import CONTROL_DIM, ContractViolation, JointState, step_array

Array = NDArray[np.float64]


class NoFeasibleSample(RuntimeError):
    """Every rollout of a batch was killed by a hard constraint."""


@dataclass(frozen=True)
class PiConfig:
    n_samples: int = 1000
    horizon_s: float = 1.0
    dt_s: float = 1.0 / 15.0
    lam: float = 1.0
    sigma_u: float = 1.0
    replan_hz: float = 15.0

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ContractViolation("n_samples must be at least 1")
        if not self.dt_s > 0 or not self.horizon_s >= self.dt_s * (1 - 1e-9):
            raise ContractViolation("need horizon_s >= dt_s > 0")
        if abs(self.horizon_s / self.dt_s - round(self.horizon_s / self.dt_s)) > 1e-6:
            raise ContractViolation("horizon_s must be a whole number of dt_s steps")
        if not self.lam > 0:
            raise ContractViolation("lambda must be positive")
        if not self.sigma_u >= 0:
            raise ContractViolation("sigma_u must be non-negative")
        if not self.replan_hz > 0 or 1.0 / self.replan_hz < self.dt_s * (1 - 1e-9):
            raise ContractViolation("replan period must be at least dt_s")

    @property
    def steps(self) -> int:
        return int(round(self.horizon_s / self.dt_s))

    @property
    def replan_period(self) -> float:
        return 1.0 / self.replan_hz

    @property
    def replan_steps(self) -> int:
        return max(1, int(round(self.replan_period / self.dt_s)))

    @property
    def control_cost(self) -> ControlCostSpec:
        return ControlCostSpec(self.lam, self.sigma_u)


@dataclass
class RolloutBatch:
    """Sampled paths with their noise, costs and normalized weights.

    ``paths`` is ``(N, S + 1, M, 4)`` (NaN after a rollout is killed) or
    ``None`` when the batch was sampled without keeping paths.
    """

    noises: Array
    costs: Array
    alive: NDArray[np.bool_]
    weights: Array
    paths: Array | None = None

    @property
    def N(self) -> int:
        return self.costs.shape[0]


@dataclass(frozen=True)
class PiDiagnostics:
    ess: float
    min_cost: float
    mean_cost: float
    alive_fraction: float
    first_control: Array | None = None


def _weighting_r(cfg: PiConfig) -> float:
    # With sigma_u = 0 every rollout carries the same control cost, so the
    # terms are dropped instead of evaluating an infinite R.
    return cfg.control_cost.r if cfg.sigma_u > 0 else 0.0


def zero_controls(cfg: PiConfig, m: int) -> Array:
    return np.zeros((cfg.steps, m, CONTROL_DIM))


def compute_weights(costs: ArrayLike, alive: ArrayLike, lam: float) -> Array:
    """Normalized ``exp(-S_k / lam)`` over alive rollouts, shifted by the best cost."""
    s = np.asarray(costs, dtype=np.float64)
    ok = np.asarray(alive, dtype=bool) & np.isfinite(s)
    if not ok.any():
        raise NoFeasibleSample("no alive rollout to weight")
    w = np.zeros_like(s)
    sa = s[ok]
    e = np.exp(-(sa - sa.min()) / lam)
    w[ok] = e / e.sum()
    return w


def effective_sample_size(weights: ArrayLike) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def update_controls(u: ArrayLike, batch: RolloutBatch, dt: float) -> Array:
    """``u*_s = u_s + (1/dt) sum_k w_k dxi_{k,s}`` for every horizon step."""
    u = np.asarray(u, dtype=np.float64)
    return u + np.matmul(batch.noises.transpose(1, 2, 3, 0), batch.weights) / dt


def shift_warm_start(u: ArrayLike, steps: int) -> Array:
    """Drop the first ``steps`` controls and pad the tail with zeros."""
    u = np.asarray(u, dtype=np.float64)
    if not 0 <= steps <= len(u):
        raise ContractViolation(f"shift {steps} outside [0, {len(u)}]")
    out = np.zeros_like(u)
    out[: len(u) - steps] = u[steps:]
    return out


def _component_major(x: Array) -> Array:
    """Copy ``(n, M, k)`` into memory laid out as ``(k, M, n)``; returns the ``(n, M, k)`` view.

    Per-agent components are then contiguous across rollouts, which is what
    the vectorized cost terms iterate over.
    """
    buf = np.empty(x.shape[::-1])
    view = buf.transpose(2, 1, 0)
    view[...] = x
    return view


def _evaluate_chunk(
    x0: Array,
    u: Array,
    noise: Array,
    cfg: PiConfig,
    cost: CostModel,
    aux0: Array | None,
    keep_paths: bool,
) -> tuple[Array, NDArray[np.bool_], Array | None]:
    n, steps = noise.shape[0], noise.shape[1]
    dt = cfg.dt_s
    x = _component_major(np.broadcast_to(x0, (n,) + x0.shape))
    aux = None if aux0 is None else np.broadcast_to(aux0, (n,) + aux0.shape).copy()
    paths = np.full((n, steps + 1) + x0.shape, np.nan) if keep_paths else None

    idx = np.arange(n)
    acc = np.zeros(n)
    run, dead = cost.running_and_violation(x, aux)
    if keep_paths:
        paths[:, 0] = x

    for s in range(steps + 1):
        if dead.any():
            keep = ~dead
            idx, acc, run = idx[keep], acc[keep], run[keep]
            x = _component_major(x[keep])
            noise = noise[keep]
            aux = None if aux is None else aux[keep]
        if idx.size == 0 or s == steps:
            break
        acc += run * dt
        if cost.exogenous is not None:
            aux = cost.exogenous.step(x, aux, dt)
        x = step_array(x, u[s], noise[:, s], dt)
        if keep_paths:
            paths[idx, s + 1] = x
        run, dead = cost.running_and_violation(x, aux)

    costs = np.full(n, np.inf)
    alive = np.zeros(n, dtype=bool)
    if idx.size:
        acc += cost.terminal_cost(x, aux)
        cross = _weighting_r(cfg) * np.einsum("smc,nsmc->n", u, noise)
        costs[idx] = acc + cross
        alive[idx] = True
    return costs, alive, paths


def sample_rollouts(
    x0: JointState | ArrayLike,
    u: ArrayLike,
    cfg: PiConfig,
    cost: CostModel,
    rng: np.random.Generator | None = None,
    *,
    noise: ArrayLike | None = None,
    aux0: ArrayLike | None = None,
    workers: int = 1,
    keep_paths: bool = True,
) -> RolloutBatch:
    """Sample ``cfg.n_samples`` rollouts from ``x0`` under importance controls ``u``.

    Path costs include the constant control cost ``0.5 u^T R u dt`` and the
    importance correction ``u^T R dxi``.  Raises :class:`NoFeasibleSample`
    when every rollout is killed.
    """
    x0 = x0.x if isinstance(x0, JointState) else np.asarray(x0, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    m = x0.shape[0]
    if u.shape != (cfg.steps, m, CONTROL_DIM):
        raise ContractViolation(f"controls {u.shape} do not match horizon ({cfg.steps}, {m}, 2)")
    if noise is None:
        if rng is None:
            raise ContractViolation("need a generator or explicit noise")
        # drawn component-major; the (N, S, M, 2) view still indexes rollouts first
        raw = rng.standard_normal((cfg.steps, CONTROL_DIM, m, cfg.n_samples))
        raw *= cfg.sigma_u * math.sqrt(cfg.dt_s)
        noise = raw.transpose(3, 0, 2, 1)
    else:
        noise = np.asarray(noise, dtype=np.float64)
    aux = None if aux0 is None else np.asarray(aux0, dtype=np.float64)

    n = noise.shape[0]
    if workers <= 1 or n < 2:
        costs, alive, paths = _evaluate_chunk(x0, u, noise, cfg, cost, aux, keep_paths)
    else:
        bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
        chunks = [noise[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: _evaluate_chunk(x0, u, c, cfg, cost, aux, keep_paths), chunks))
        costs = np.concatenate([p[0] for p in parts])
        alive = np.concatenate([p[1] for p in parts])
        paths = np.concatenate([p[2] for p in parts]) if keep_paths else None

    costs = np.where(alive, costs + 0.5 * _weighting_r(cfg) * float(np.sum(u * u)) * cfg.dt_s, np.inf)
    if not alive.any():
        raise NoFeasibleSample("all rollouts hit a hard constraint")
    weights = compute_weights(costs, alive, cfg.lam)
    return RolloutBatch(noises=noise, costs=costs, alive=alive, weights=weights, paths=paths)


def diagnostics(batch: RolloutBatch, first_control: Array | None = None) -> PiDiagnostics:
    alive_costs = batch.costs[batch.alive]
    return PiDiagnostics(
        ess=effective_sample_size(batch.weights),
        min_cost=float(alive_costs.min()),
        mean_cost=float(alive_costs.mean()),
        alive_fraction=float(batch.alive.mean()),
        first_control=first_control,
    )


def mpc_step(
    x0: JointState | ArrayLike,
    warm: ArrayLike,
    cfg: PiConfig,
    cost: CostModel,
    rng: np.random.Generator,
    *,
    aux0: ArrayLike | None = None,
    workers: int = 1,
) -> tuple[Array, Array, PiDiagnostics]:
    """One receding-horizon replan.

    Returns the per-agent target velocity ``v + u*_0 / replan_hz``, the updated
    control sequence shifted by one replan period for reuse, and diagnostics.
    """
    x = x0.x if isinstance(x0, JointState) else np.asarray(x0, dtype=np.float64)
    batch = sample_rollouts(x, warm, cfg, cost, rng, aux0=aux0, workers=workers, keep_paths=False)
    u_star = update_controls(warm, batch, cfg.dt_s)
    v_next = x[:, 2:] + cfg.replan_period * u_star[0]
    return v_next, shift_warm_start(u_star, min(cfg.replan_steps, cfg.steps)), diagnostics(batch, u_star[0].copy())


class PiController:
    """Receding-horizon wrapper that keeps the warm start between replans.

    When a replan finds no feasible rollout, the previous warm start is
    shifted and reused and the agents are told to hold their velocity for
    one period.
    """

    def __init__(self, cfg: PiConfig, cost: CostModel, workers: int = 1, warm: ArrayLike | None = None) -> None:
        self.cfg = cfg
        self.cost = cost
        self.workers = workers
        self.warm = None if warm is None else np.asarray(warm, dtype=np.float64)

    def act(self, k: int, x: Array, aux: Array | None, rng: np.random.Generator) -> tuple[Array, dict]:
        if self.warm is None:
            self.warm = zero_controls(self.cfg, x.shape[0])
        try:
            v_next, self.warm, diag = mpc_step(x, self.warm, self.cfg, self.cost, rng, aux0=aux, workers=self.workers)
        except NoFeasibleSample:
            self.warm = shift_warm_start(self.warm, min(self.cfg.replan_steps, self.cfg.steps))
            return x[:, 2:].copy(), {"u": np.zeros((x.shape[0], 2)), "ess": np.nan, "event": "no_feasible_sample"}
        return v_next, {"u": diag.first_control, "ess": diag.ess}
