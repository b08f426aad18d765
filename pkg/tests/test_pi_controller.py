from __future__ import annotations

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picontrol.costs import CostModel, ObstacleSet, QuadraticCost, obstacle_violation
from picontrol.dynamics import ContractViolation
from picontrol.pi_controller import (
    NoFeasibleSample,
    PiConfig,
    PiController,
    RolloutBatch,
    compute_weights,
    diagnostics,
    effective_sample_size,
    mpc_step,
    sample_rollouts,
    shift_warm_start,
    update_controls,
    zero_controls,
)

CFG = PiConfig(n_samples=200, horizon_s=0.5, dt_s=0.1, lam=1.0, sigma_u=1.0, replan_hz=10)


def _quad(m=1):
    return CostModel(QuadraticCost(np.eye(4 * m)), QuadraticCost(np.eye(4 * m)))


QUAD = _quad()


def _x0(m=1):
    return np.tile([[1.0, -0.5, 0.2, 0.0]], (m, 1))


# ---------------------------------------------------------------------------
# config


def test_config_invariants():
    with pytest.raises(ContractViolation):
        PiConfig(n_samples=0)
    with pytest.raises(ContractViolation):
        PiConfig(horizon_s=0.05, dt_s=0.1)
    with pytest.raises(ContractViolation):
        PiConfig(lam=0.0)
    with pytest.raises(ContractViolation):
        PiConfig(replan_hz=30, dt_s=0.1)
    assert PiConfig(horizon_s=1.0, dt_s=1 / 15).steps == 15
    assert PiConfig(dt_s=0.05, replan_hz=10).replan_steps == 2


# ---------------------------------------------------------------------------
# weights and ESS


def test_weights_uniform():
    npt.assert_allclose(compute_weights([3.0] * 4, [True] * 4, 0.7), 0.25, rtol=0, atol=1e-15)


def test_weights_softmax_example():
    w = compute_weights([0.0, math.log(2.0)], [True, True], 1.0)
    npt.assert_allclose(w, [2 / 3, 1 / 3], rtol=1e-14)


def test_weights_single_survivor():
    w = compute_weights([5.0, np.inf, 1.0], [True, False, False], 0.1)
    npt.assert_array_equal(w, [1.0, 0.0, 0.0])


def test_weights_no_alive():
    with pytest.raises(NoFeasibleSample):
        compute_weights([1.0, 2.0], [False, False], 1.0)


def test_weights_survive_huge_cost_spread():
    w = compute_weights([1e4, 1e4 + 1.0, 2e6], [True] * 3, 1.0)
    assert np.all(np.isfinite(w)) and abs(w.sum() - 1) < 1e-12


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50),
    st.floats(1e-3, 1e3),
    st.integers(0, 2**32 - 1),
)
def test_weight_and_ess_properties(costs, lam, seed):
    alive = np.random.default_rng(seed).random(len(costs)) < 0.8
    alive[0] = True
    w = compute_weights(costs, alive, lam)
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all((w >= 0) & (w <= 1))
    assert np.all(w[~alive] == 0.0)
    ess = effective_sample_size(w)
    assert 1 - 1e-9 <= ess <= alive.sum() + 1e-9


def test_ess_examples():
    assert effective_sample_size(np.full(8, 1 / 8)) == pytest.approx(8.0, rel=1e-14)
    assert effective_sample_size([0.0, 1.0, 0.0]) == 1.0
    assert effective_sample_size([2 / 3, 1 / 3]) == pytest.approx(1.8, rel=1e-14)


def test_ess_equals_n_only_for_uniform():
    w = np.full(5, 0.2)
    w[0] += 1e-3
    w[1] -= 1e-3
    assert effective_sample_size(w) < 5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-2000, 2000), min_size=2, max_size=30), st.integers(-64, 64))
def test_cost_shift_invariance_is_bitwise(ks, c):
    # dyadic costs and shifts keep every subtraction exact
    s = np.array(ks, dtype=np.float64) / 1024
    alive = np.ones(len(s), dtype=bool)
    a = compute_weights(s, alive, 0.3)
    b = compute_weights(s + float(c), alive, 0.3)
    npt.assert_array_equal(a, b)
    assert effective_sample_size(a) == effective_sample_size(b)
    noise = np.arange(len(s) * 2, dtype=np.float64).reshape(len(s), 1, 1, 2)
    u = np.zeros((1, 1, 2))
    ua = update_controls(u, RolloutBatch(noise, s, alive, a), 0.1)
    ub = update_controls(u, RolloutBatch(noise, s + c, alive, b), 0.1)
    npt.assert_array_equal(ua, ub)


def test_killed_rollouts_never_contribute():
    alive = np.array([True, False, True, False])
    a = compute_weights([1.0, np.inf, 2.0, np.inf], alive, 0.5)
    b = compute_weights([1.0, -50.0, 2.0, 0.0], alive, 0.5)
    npt.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# control update and shifting


def test_update_single_sample():
    noise = np.full((1, 1, 1, 2), 0.05)
    out = update_controls(np.zeros((1, 1, 2)), RolloutBatch(noise, np.zeros(1), np.ones(1, bool), np.ones(1)), 0.1)
    npt.assert_allclose(out, 0.5, rtol=1e-14)


def test_update_antisymmetric_batch_is_identity():
    rng = np.random.default_rng(0)
    half = rng.normal(size=(50, 4, 2, 2))
    noise = np.concatenate([half, -half])
    u = rng.normal(size=(4, 2, 2))
    w = np.full(100, 0.01)
    out = update_controls(u, RolloutBatch(noise, np.zeros(100), np.ones(100, bool), w), 0.1)
    npt.assert_allclose(out, u, rtol=0, atol=1e-13)


def test_shift_examples():
    u = np.arange(6, dtype=np.float64).reshape(3, 1, 2)
    npt.assert_array_equal(shift_warm_start(u, 0), u)
    npt.assert_array_equal(shift_warm_start(u, 3), np.zeros_like(u))
    npt.assert_array_equal(shift_warm_start(u, 1), [[[2, 3]], [[4, 5]], [[0, 0]]])
    with pytest.raises(ContractViolation):
        shift_warm_start(u, 4)


# ---------------------------------------------------------------------------
# sampling


def test_zero_noise_paths_identical():
    cfg = PiConfig(n_samples=20, horizon_s=0.5, dt_s=0.1, lam=1.0, sigma_u=0.0, replan_hz=10)
    u = np.random.default_rng(1).normal(size=(5, 2, 2))
    b = sample_rollouts(_x0(2), u, cfg, _quad(2), np.random.default_rng(2))
    assert np.all(b.paths == b.paths[0])
    assert np.all(b.costs == b.costs[0])
    assert effective_sample_size(b.weights) == pytest.approx(20.0)


def test_infeasible_start_raises():
    obs = ObstacleSet.from_corners([[[0.0, -1.0], [2.0, 1.0]]], 0.5)
    cost = CostModel(hard_violation=lambda x, aux=None: obstacle_violation(x, obs))
    with pytest.raises(NoFeasibleSample):
        sample_rollouts(_x0(), zero_controls(CFG, 1), CFG, cost, np.random.default_rng(0))


def test_horizon_mismatch_rejected():
    with pytest.raises(ContractViolation):
        sample_rollouts(_x0(), np.zeros((4, 1, 2)), CFG, QUAD, np.random.default_rng(0))


def test_killed_rollouts_have_zero_weight():
    obs = ObstacleSet.from_corners([[[1.3, -5.0], [3.0, 5.0]]], 0.0)
    cost = CostModel(QuadraticCost(np.eye(4)), hard_violation=lambda x, aux=None: obstacle_violation(x, obs))
    u = np.zeros((5, 1, 2))
    u[:, 0, 0] = 3.0
    b = sample_rollouts(_x0(), u, CFG, cost, np.random.default_rng(3))
    assert 0 < b.alive.sum() < b.N
    assert np.all(b.weights[~b.alive] == 0.0)
    assert np.all(np.isinf(b.costs[~b.alive]))
    for k in np.flatnonzero(~b.alive):
        recorded = ~np.isnan(b.paths[k, :, 0, 0])
        last = np.flatnonzero(recorded)[-1]
        assert obstacle_violation(b.paths[k, last][None], obs)[0]
        assert not recorded[last + 1 :].any()
    d = diagnostics(b)
    assert d.alive_fraction == b.alive.mean()
    assert 1 <= d.ess <= b.alive.sum()


def test_sampling_deterministic_and_worker_invariant():
    u = np.random.default_rng(0).normal(size=(5, 3, 2))
    q = _quad(3)
    a = sample_rollouts(_x0(3), u, CFG, q, np.random.default_rng(42))
    b = sample_rollouts(_x0(3), u, CFG, q, np.random.default_rng(42))
    c = sample_rollouts(_x0(3), u, CFG, q, np.random.default_rng(42), workers=4)
    for other in (b, c):
        npt.assert_array_equal(a.noises, other.noises)
        npt.assert_array_equal(a.costs, other.costs)
        npt.assert_array_equal(a.weights, other.weights)
        npt.assert_array_equal(a.paths, other.paths)


def test_noise_statistics():
    cfg = PiConfig(n_samples=20000, horizon_s=0.2, dt_s=0.1, lam=1.0, sigma_u=0.5, replan_hz=10)
    b = sample_rollouts(_x0(), zero_controls(cfg, 1), cfg, CostModel(), np.random.default_rng(9), keep_paths=False)
    var = b.noises.reshape(-1).var()
    assert var == pytest.approx(0.25 * 0.1, rel=3 * math.sqrt(2 / b.noises.size))


# ---------------------------------------------------------------------------
# receding horizon


def test_zero_cost_update_is_unbiased():
    cfg = PiConfig(n_samples=100, horizon_s=0.5, dt_s=0.1, lam=1.0, sigma_u=1.0, replan_hz=10)
    v0 = np.array([0.3, -0.2])
    x = np.array([[0.0, 0.0, *v0]])
    vs = np.array([mpc_step(x, zero_controls(cfg, 1), cfg, CostModel(), np.random.default_rng(s))[0][0] for s in range(100)])
    se = vs.std(axis=0, ddof=1) / math.sqrt(len(vs))
    assert np.all(np.abs(vs.mean(axis=0) - v0) <= 3 * se)


def test_mpc_step_handoff_and_shift():
    x = _x0()
    warm = np.random.default_rng(5).normal(size=(5, 1, 2))
    v_next, warm2, diag = mpc_step(x, warm, CFG, QUAD, np.random.default_rng(6))
    b = sample_rollouts(x, warm, CFG, QUAD, np.random.default_rng(6), keep_paths=False)
    u_star = update_controls(warm, b, CFG.dt_s)
    npt.assert_array_equal(v_next, x[:, 2:] + 0.1 * u_star[0])
    npt.assert_array_equal(warm2, shift_warm_start(u_star, 1))
    assert diag.ess == effective_sample_size(b.weights)


def test_controller_holds_velocity_when_infeasible():
    obs = ObstacleSet.from_corners([[[0.0, -1.0], [2.0, 1.0]]], 0.5)
    cost = CostModel(hard_violation=lambda x, aux=None: obstacle_violation(x, obs))
    ctrl = PiController(CFG, cost)
    v, info = ctrl.act(0, _x0(), None, np.random.default_rng(0))
    npt.assert_array_equal(v, _x0()[:, 2:])
    assert info["event"] == "no_feasible_sample"
    assert ctrl.warm.shape == (5, 1, 2)


def test_controller_pulls_toward_origin():
    ctrl = PiController(PiConfig(n_samples=2000, horizon_s=1.0, dt_s=0.1, lam=1.0, sigma_u=1.0, replan_hz=10), QUAD)
    x = np.array([[3.0, 0.0, 0.0, 0.0]])
    v, info = ctrl.act(0, x, None, np.random.default_rng(1))
    assert v[0, 0] < 0
    assert 1 <= info["ess"] <= 2000
