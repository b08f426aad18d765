"""Discrete finite-horizon LQR, used as the reference solution for LQ tasks.

The problem matches the sampled one exactly: ``x' = A x + B u`` and cost
``sum_t (0.5 x_t^T Q x_t + 0.5 u_t^T R u_t) dt + 0.5 x_S^T Q_T x_S``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]


@dataclass(frozen=True)
class LqrSolution:
    gains: Array  # (S, m, n), u_t = -K_t x_t
    value: Array  # (S + 1, n, n)
    states: Array  # (S + 1, n)
    controls: Array  # (S, m)
    cost: float


def finite_horizon_lqr(
    A: Array, B: Array, Q: Array, R: Array, Q_T: Array, steps: int, dt: float, x0: Array
) -> LqrSolution:
    n, m = B.shape
    P = np.zeros((steps + 1, n, n))
    K = np.zeros((steps, m, n))
    P[steps] = Q_T
    for t in range(steps - 1, -1, -1):
        Pn = P[t + 1]
        K[t] = np.linalg.solve(R * dt + B.T @ Pn @ B, B.T @ Pn @ A)
        Pt = Q * dt + A.T @ Pn @ (A - B @ K[t])
        P[t] = 0.5 * (Pt + Pt.T)
    xs = np.zeros((steps + 1, n))
    us = np.zeros((steps, m))
    xs[0] = x0
    for t in range(steps):
        us[t] = -K[t] @ xs[t]
        xs[t + 1] = A @ xs[t] + B @ us[t]
    return LqrSolution(K, P, xs, us, float(0.5 * x0 @ P[0] @ x0))
