"""Iterative LQG trajectory optimization for the point-mass team.

The dynamics are linear, so each iteration only needs a quadratic model of
the state cost along the nominal trajectory.  That model comes from the
cost term's analytic ``derivs`` when it has one, otherwise from central
finite differences.  The solver is certainty equivalent: nothing in it
depends on the noise level.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .costs import CostModel
from .dynamics import CONTROL_DIM, ContractViolation, JointState, discrete_matrices

Array = NDArray[np.float64]
log = logging.getLogger(__name__)


class NonFiniteCost(RuntimeError):
    def __init__(self, step: int) -> None:
        super().__init__(f"non-finite cost along the nominal trajectory at step {step}")
        self.step = step


@dataclass(frozen=True)
class IlqgConfig:
    """Solver settings.

    ``step_size`` blends the new feedforward into the old controls when
    ``mode == "blend"``; ``mode == "linesearch"`` backtracks from a full step.
    ``control_weight`` is the scalar ``R`` of the quadratic control cost.
    """

    horizon_s: float = 3.0
    dt_s: float = 1.0 / 15.0
    control_weight: float = 1.0
    max_iters: int = 1000
    step_size: float = 0.005
    convergence_tol: float = 1e-7
    mode: str = "blend"
    max_backtracks: int = 12

    def __post_init__(self) -> None:
        if not 0 < self.step_size <= 1:
            raise ContractViolation("step_size must be in (0, 1]")
        if self.max_iters < 1:
            raise ContractViolation("max_iters must be at least 1")
        if not self.dt_s > 0 or self.horizon_s < self.dt_s * (1 - 1e-9):
            raise ContractViolation("need horizon_s >= dt_s > 0")
        if self.mode not in ("blend", "linesearch"):
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if not self.control_weight > 0:
            raise ContractViolation("control_weight must be positive")

    @property
    def steps(self) -> int:
        return int(round(self.horizon_s / self.dt_s))


@dataclass
class IlqgSolution:
    nominal_states: Array  # (S + 1, M, 4)
    nominal_controls: Array  # (S, M, 2)
    feedback_gains: Array  # (S, 2M, 4M)
    cost_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    diverged: bool = False


# ---------------------------------------------------------------------------
# Quadratic models of the state cost


def _fd_gradient(f: Callable[[Array], Array], xs: Array, shape: tuple[int, ...]) -> Array:
    """Central differences of ``f`` at each row of ``xs`` ``(K, n)``; step 1e-5 scaled."""
    k, n = xs.shape
    h = 1e-5 * np.maximum(1.0, np.abs(xs))
    eye = np.eye(n)
    plus = xs[:, None, :] + h[:, None, :] * eye
    minus = xs[:, None, :] - h[:, None, :] * eye
    both = np.concatenate([plus, minus], axis=1).reshape((k * 2 * n,) + shape)
    vals = np.asarray(f(both), dtype=np.float64).reshape(k, 2, n)
    return (vals[:, 0] - vals[:, 1]) / (2 * h)


def _psd_clamp(h: Array, floor: float = 1e-6) -> Array:
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    w, v = np.linalg.eigh(h)
    bad = np.any(w < floor, axis=-1)
    if bad.any():
        wc = np.maximum(w[bad], floor)
        h = h.copy()
        h[bad] = np.einsum("...ij,...j,...kj->...ik", v[bad], wc, v[bad])
    return h


def quadratize(cost_fn: Callable[..., Array], xs: ArrayLike, regularize: bool = True) -> tuple[Array, Array]:
    """Gradients ``(K, n)`` and Hessians ``(K, n, n)`` of a state cost at states ``(K, M, 4)``.

    Hessians are symmetrized and, if ``regularize``, eigenvalue-clamped at 1e-6.
    """
    xs = np.asarray(xs, dtype=np.float64)
    shape = xs.shape[1:]
    k, n = xs.shape[0], int(np.prod(shape))
    if hasattr(cost_fn, "derivs"):
        g, h = cost_fn.derivs(xs)
        g = g.reshape(k, n)
        h = h.reshape(k, n, n)
    else:
        flat = xs.reshape(k, n)
        g = _fd_gradient(lambda z: cost_fn(z, None), flat, shape)
        hstep = 1e-4 * np.maximum(1.0, np.abs(flat))
        h = np.empty((k, n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            gp = _fd_gradient(lambda z: cost_fn(z, None), flat + hstep[:, j:j + 1] * e, shape)
            gm = _fd_gradient(lambda z: cost_fn(z, None), flat - hstep[:, j:j + 1] * e, shape)
            h[:, :, j] = (gp - gm) / (2 * hstep[:, j:j + 1])
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        raise ContractViolation("NaN in cost derivatives")
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    return g, (_psd_clamp(h) if regularize else h)


# ---------------------------------------------------------------------------
# Solver


def _rollout(x0: Array, us: Array, A: Array, B: Array) -> Array:
    xs = np.empty((us.shape[0] + 1, x0.size))
    xs[0] = x0
    for t in range(us.shape[0]):
        xs[t + 1] = A @ xs[t] + B @ us[t]
    return xs


def _total_cost(xs: Array, us: Array, cost: CostModel, r: float, dt: float, shape: tuple[int, ...]) -> tuple[float, Array]:
    run = cost.running_cost(xs[:-1].reshape((-1,) + shape), None)
    term = cost.terminal_cost(xs[-1].reshape(shape), None)
    per_step = (run + 0.5 * r * np.sum(us * us, axis=1)) * dt
    return float(np.sum(per_step) + term), per_step


def ilqg_solve(
    x0: JointState | ArrayLike,
    cost: CostModel,
    cfg: IlqgConfig,
    u_init: ArrayLike | None = None,
) -> IlqgSolution:
    """Optimize an open-loop control sequence plus time-varying feedback gains."""
    if cost.exogenous is not None:
        raise ContractViolation("iLQG needs a cost without exogenous processes")
    x0 = x0.x if isinstance(x0, JointState) else np.asarray(x0, dtype=np.float64)
    shape = x0.shape
    m = shape[0]
    n, nu = 4 * m, CONTROL_DIM * m
    S, dt, r = cfg.steps, cfg.dt_s, cfg.control_weight
    A, B = discrete_matrices(dt, m)
    us = np.zeros((S, nu)) if u_init is None else np.asarray(u_init, dtype=np.float64).reshape(S, nu).copy()
    xs = _rollout(x0.reshape(-1), us, A, B)
    J, per_step = _total_cost(xs, us, cost, r, dt, shape)
    if not np.isfinite(J):
        bad = np.flatnonzero(~np.isfinite(per_step))
        raise NonFiniteCost(int(bad[0]) if bad.size else S)

    trace = [J]
    K = np.zeros((S, nu, n))
    mu = 0.0
    converged = diverged = False
    it = 0
    alphas = (
        [cfg.step_size] if cfg.mode == "blend" else [0.5**i for i in range(cfg.max_backtracks + 1)]
    )
    while it < cfg.max_iters:
        it += 1
        gx, hx = quadratize(cost.running_cost, xs[:-1].reshape((S,) + shape))
        gT, hT = quadratize(cost.terminal_cost, xs[-1].reshape((1,) + shape))
        accepted = False
        for _attempt in range(cfg.max_backtracks + 1):
            k_ff, K_new, ok = _backward(gx * dt, hx * dt, gT[0], hT[0], us, A, B, r * dt, mu)
            if not ok:
                mu = max(10 * mu, 1e-6)
                continue
            for alpha in alphas:
                xs_new, us_new = _forward(x0.reshape(-1), xs, us, k_ff, K_new, alpha, A, B)
                J_new, _ = _total_cost(xs_new, us_new, cost, r, dt, shape)
                if np.isfinite(J_new) and J_new <= J:
                    accepted = True
                    break
            if accepted:
                break
            mu = max(10 * mu, 1e-6)
        if not accepted:
            diverged = True
            log.warning("iLQG: no decreasing step after %d damping increases", cfg.max_backtracks)
            break
        improvement = (J - J_new) / max(abs(J), 1e-12)
        xs, us, K, J = xs_new, us_new, K_new, J_new
        trace.append(J)
        mu = mu / 10 if mu > 1e-9 else 0.0
        if improvement < cfg.convergence_tol:
            converged = True
            break

    return IlqgSolution(
        nominal_states=xs.reshape((S + 1,) + shape),
        nominal_controls=us.reshape(S, m, CONTROL_DIM),
        feedback_gains=K,
        cost_trace=trace,
        iterations=it,
        converged=converged,
        diverged=diverged,
    )


def _backward(
    lx: Array, lxx: Array, gT: Array, hT: Array, us: Array, A: Array, B: Array, ru: float, mu: float
) -> tuple[Array, Array, bool]:
    S, nu = us.shape
    n = A.shape[0]
    Vx, Vxx = gT.copy(), hT.copy()
    k_ff = np.zeros((S, nu))
    K = np.zeros((S, nu, n))
    I_u = np.eye(nu)
    for t in range(S - 1, -1, -1):
        Qx = lx[t] + A.T @ Vx
        Qu = ru * us[t] + B.T @ Vx
        VB = Vxx @ B
        Qxx = lxx[t] + A.T @ Vxx @ A
        Quu = ru * I_u + B.T @ VB
        Qux = VB.T @ A
        Quu_reg = Quu + mu * I_u
        try:
            L = np.linalg.cholesky(Quu_reg)
        except np.linalg.LinAlgError:
            return k_ff, K, False
        sol = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Qu, Qux])))
        k_ff[t] = -sol[:, 0]
        K[t] = -sol[:, 1:]
        Vx = Qx + K[t].T @ Quu @ k_ff[t] + K[t].T @ Qu + Qux.T @ k_ff[t]
        Vxx = Qxx + K[t].T @ Quu @ K[t] + K[t].T @ Qux + Qux.T @ K[t]
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k_ff, K, True


def _forward(
    x0: Array, xs: Array, us: Array, k_ff: Array, K: Array, alpha: float, A: Array, B: Array
) -> tuple[Array, Array]:
    S = us.shape[0]
    xs_new = np.empty_like(xs)
    us_new = np.empty_like(us)
    xs_new[0] = x0
    for t in range(S):
        us_new[t] = us[t] + alpha * k_ff[t] + K[t] @ (xs_new[t] - xs[t])
        xs_new[t + 1] = A @ xs_new[t] + B @ us_new[t]
    return xs_new, us_new


# ---------------------------------------------------------------------------
# Closed-loop execution


class IlqgController:
    """Executes a converged iLQG plan with its linear feedback gains.

    With ``resolve=True`` the plan is re-optimized at every replan from the
    measured state, warm-started with the shifted previous controls.
    """

    def __init__(self, cost: CostModel, cfg: IlqgConfig, replan_hz: float = 15.0, resolve: bool = False) -> None:
        self.cost = cost
        self.cfg = cfg
        self.replan_period = 1.0 / replan_hz
        self.resolve = resolve
        self.solution: IlqgSolution | None = None
        self._t0 = 0

    def plan(self, x: Array) -> IlqgSolution:
        self.solution = ilqg_solve(x, self.cost, self.cfg)
        self._t0 = 0
        return self.solution

    def act(self, k: int, x: Array, aux: Array | None, rng: np.random.Generator) -> tuple[Array, dict]:
        """Target velocity for replan index ``k`` at measured state ``x``."""
        if self.solution is None:
            self.plan(x)
        sol = self.solution
        S = sol.nominal_controls.shape[0]
        shift = max(1, int(round(self.replan_period / self.cfg.dt_s)))
        if self.resolve and k > 0:
            warm = np.zeros_like(sol.nominal_controls)
            warm[: S - shift] = sol.nominal_controls[shift:]
            self.solution = sol = ilqg_solve(x, self.cost, self.cfg, u_init=warm)
            t = 0
        else:
            t = k * shift
        m = x.shape[0]
        if t >= S:
            return np.zeros((m, 2)), {"u": np.zeros((m, 2))}
        dx = x.reshape(-1) - sol.nominal_states[t].reshape(-1)
        u = sol.nominal_controls[t].reshape(-1) + sol.feedback_gains[t] @ dx
        u = u.reshape(m, 2)
        return x[:, 2:] + self.replan_period * u, {"u": u}


def execute_ilqg_mpc(x0: JointState | ArrayLike, cost: CostModel, cfg: IlqgConfig, plant, resolve: bool = False):
    """Run an iLQG plan in closed loop on ``plant`` (a :class:`picontrol.sim.Plant`)."""
    from .sim import run_closed_loop

    x0 = x0.x if isinstance(x0, JointState) else np.asarray(x0, dtype=np.float64)
    ctrl = IlqgController(cost, cfg, replan_hz=1.0 / plant.replan_period, resolve=resolve)
    return run_closed_loop(x0, ctrl, plant)
