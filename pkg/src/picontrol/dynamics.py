"""Planar point-mass dynamics for a team of agents.

The joint state is stored agent-major as an array of shape ``(M, 4)`` with
columns ``(p_E, p_N, v_E, v_N)``.  Batched states carry extra leading axes,
e.g. ``(N, M, 4)`` for N rollouts.  Controls and noise increments are
per-agent East/North accelerations with shape ``(..., M, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

STATE_DIM = 4
CONTROL_DIM = 2


class ContractViolation(ValueError):
    """Raised when an operation is called with inputs that break its contract."""


@dataclass(frozen=True)
class AgentState:
    p: tuple[float, float]
    v: tuple[float, float]

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.p + self.v)):
            raise ContractViolation("agent state must be finite")


@dataclass(frozen=True, eq=False)
class JointState:
    """Stacked agent states; ``x`` has shape ``(M, 4)`` and is read-only."""

    x: NDArray[np.float64]

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != STATE_DIM or x.shape[0] < 1:
            raise ContractViolation(f"joint state must have shape (M, 4), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractViolation("joint state must be finite")
        x.flags.writeable = False
        object.__setattr__(self, "x", x)

    @classmethod
    def from_agents(cls, agents: list[AgentState]) -> JointState:
        return cls(np.array([[*a.p, *a.v] for a in agents], dtype=np.float64))

    @classmethod
    def from_arrays(cls, positions: ArrayLike, velocities: ArrayLike) -> JointState:
        return cls(np.hstack([np.asarray(positions, float), np.asarray(velocities, float)]))

    @property
    def M(self) -> int:
        return self.x.shape[0]

    @property
    def positions(self) -> NDArray[np.float64]:
        return self.x[:, :2]

    @property
    def velocities(self) -> NDArray[np.float64]:
        return self.x[:, 2:]

    @property
    def agents(self) -> list[AgentState]:
        return [AgentState((r[0], r[1]), (r[2], r[3])) for r in self.x.tolist()]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, JointState) and np.array_equal(self.x, other.x)

    def __hash__(self) -> int:
        return hash(self.x.tobytes())


@dataclass(frozen=True)
class DynamicsModel:
    """Double integrator per agent with isotropic control noise.

    ``sigma_u`` is the per-axis noise intensity, so one step of length ``dt``
    adds a velocity increment with variance ``sigma_u**2 * dt``.
    """

    dt: float
    sigma_u: float
    M: int = 1

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ContractViolation("dt must be positive")
        if not self.sigma_u >= 0:
            raise ContractViolation("sigma_u must be non-negative")
        if self.M < 1:
            raise ContractViolation("need at least one agent")

    @property
    def noise_cov(self) -> NDArray[np.float64]:
        return self.sigma_u**2 * np.eye(CONTROL_DIM * self.M)

    def discrete_matrices(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Return ``(A_d, B_d)`` of the joint one-step map ``x' = A_d x + B_d u``."""
        return discrete_matrices(self.dt, self.M)


def discrete_matrices(dt: float, M: int = 1) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    a = np.eye(STATE_DIM)
    a[0, 2] = a[1, 3] = dt
    b = np.zeros((STATE_DIM, CONTROL_DIM))
    b[2, 0] = b[3, 1] = dt
    return np.kron(np.eye(M), a), np.kron(np.eye(M), b)


def step_array(x: NDArray, u: NDArray, dxi: NDArray, dt: float) -> NDArray:
    """Unchecked batched Euler-Maruyama step, used in the rollout hot loop."""
    out = np.empty_like(x)
    out[..., :2] = x[..., :2] + x[..., 2:] * dt
    out[..., 2:] = x[..., 2:] + u * dt + dxi
    return out


def step(state: JointState | ArrayLike, control: ArrayLike, noise: ArrayLike, dt: float) -> JointState:
    """Advance every agent by one step: ``p += v dt``, ``v += u dt + dxi``."""
    x = state.x if isinstance(state, JointState) else np.asarray(state, dtype=np.float64)
    u = np.asarray(control, dtype=np.float64)
    dxi = np.asarray(noise, dtype=np.float64)
    if not dt > 0:
        raise ContractViolation("dt must be positive")
    m = x.shape[0]
    if u.shape != (m, CONTROL_DIM) or dxi.shape != (m, CONTROL_DIM):
        raise ContractViolation(
            f"control {u.shape} and noise {dxi.shape} must both be ({m}, {CONTROL_DIM})"
        )
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(dxi)) and np.isfinite(dt)):
        raise ContractViolation("non-finite control, noise or dt")
    return JointState(step_array(x, u, dxi, dt))


def sample_noise(
    rng: np.random.Generator, model: DynamicsModel, size: tuple[int, ...] = ()
) -> NDArray[np.float64]:
    """Draw Wiener increments of shape ``size + (M, 2)`` with variance ``sigma_u**2 dt``."""
    shape = tuple(size) + (model.M, CONTROL_DIM)
    if model.sigma_u == 0:
        return np.zeros(shape)
    return rng.standard_normal(shape) * (model.sigma_u * np.sqrt(model.dt))


def propagate_velocity_command(v_now: ArrayLike, u_star: ArrayLike, delta_t: float) -> NDArray[np.float64]:
    """Target velocity handed to the low-level controller after ``delta_t`` seconds."""
    return np.asarray(v_now, dtype=np.float64) + delta_t * np.asarray(u_star, dtype=np.float64)
