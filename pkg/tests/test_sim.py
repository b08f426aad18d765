from __future__ import annotations

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picontrol.costs import HoldingPatternParams, ObstacleSet
from picontrol.dynamics import ContractViolation, step
from picontrol.sim import (
    DisturbanceModel,
    EpisodeLog,
    LowLevelModel,
    MouseModel,
    Plant,
    formation_metrics,
    mouse_policy,
    plant_step,
    read_log_csv,
    run_closed_loop,
    smoothed,
)

DT = 1 / 15
HP = HoldingPatternParams(1.0, 3.0, 7.0, 20.0)


# ---------------------------------------------------------------------------
# mouse


@pytest.mark.parametrize(
    "cats, expected",
    [
        ([[1.0, 0.0]], (-3.0, 0.0)),
        ([[1.0, 0.0], [-1.0, 0.0]], (0.0, 0.0)),
        ([[3.0, 0.0], [0.0, 4.0]], (-2.4, -1.8)),
    ],
)
def test_mouse_policy_examples(cats, expected):
    npt.assert_allclose(mouse_policy((0.0, 0.0), cats, 3.0), expected, atol=1e-15)


def test_mouse_printed_sign_runs_towards_cats():
    npt.assert_allclose(mouse_policy((0.0, 0.0), [[1.0, 0.0]], 3.0, escape=False), (3.0, 0.0))


def test_mouse_caught_is_not_an_error():
    npt.assert_array_equal(mouse_policy((1.0, 1.0), [[1.0, 1.0], [5.0, 5.0]], 3.0), (0.0, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(0, 2 * math.pi), st.integers(0, 10_000))
def test_mouse_policy_equivariant_and_bounded(m, theta, seed):
    rng = np.random.default_rng(seed)
    cats = rng.normal(scale=5, size=(m, 2))
    pm = rng.normal(scale=5, size=2)
    centre = rng.normal(size=2)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    v = mouse_policy(pm, cats, 3.0)
    vr = mouse_policy((pm - centre) @ rot.T + centre, (cats - centre) @ rot.T + centre, 3.0)
    npt.assert_allclose(vr, rot @ v, atol=1e-9)
    assert np.linalg.norm(v) <= 3.0 + 1e-9


def test_mouse_policy_batches():
    pm = np.array([[0.0, 0.0], [0.0, 0.0]])
    cats = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    npt.assert_allclose(mouse_policy(pm, cats, 2.0), [[-2.0, 0.0], [0.0, -2.0]])


# ---------------------------------------------------------------------------
# plant


def test_ideal_tracking_reaches_command_in_one_step():
    x = np.array([[0.0, 0.0, 1.0, 0.0]])
    out, _ = plant_step(x, [[0.0, 2.0]], LowLevelModel(0.0, 1e6), None, np.zeros((1, 2)), DT)
    npt.assert_allclose(out[0], [DT, 0.0, 0.0, 2.0], atol=1e-15)


def test_tracking_lag_and_saturation():
    x = np.array([[0.0, 0.0, 0.0, 0.0]])
    out, _ = plant_step(x, [[1.0, 0.0]], LowLevelModel(0.5, 100.0), None, np.zeros((1, 2)), 0.1)
    assert out[0, 2] == pytest.approx(0.2)
    out, _ = plant_step(x, [[100.0, 0.0]], LowLevelModel(0.0, 5.0), None, np.zeros((1, 2)), 0.1)
    assert out[0, 2] == pytest.approx(0.5)


def test_plant_rejects_bad_input():
    with pytest.raises(ContractViolation):
        plant_step(np.zeros((1, 4)), np.zeros((1, 2)), LowLevelModel(), None, np.zeros((1, 2)), 0.0)
    with pytest.raises(ContractViolation):
        plant_step(np.zeros((1, 4)), [[np.inf, 0.0]], LowLevelModel(), None, np.zeros((1, 2)), 0.1)
    with pytest.raises(ContractViolation):
        LowLevelModel(tau_v=-1.0)
    with pytest.raises(ContractViolation):
        DisturbanceModel(ou_sigma=-1.0)


def test_zero_command_ideal_plant_reduces_to_dynamics():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    for _ in range(20):
        want = step(x, np.zeros((3, 2)), np.zeros((3, 2)), DT).x
        x, _ = plant_step(x, x[:, 2:], LowLevelModel(0.0), None, np.zeros((3, 2)), DT)
        npt.assert_array_equal(x, want)


def test_wind_mean_is_reached():
    dist = DisturbanceModel((1.0, 0.0), ou_theta=1.0, ou_sigma=0.0, drag=0.5)
    x = np.zeros((1, 4))
    wind = np.zeros((1, 2))
    for _ in range(3000):
        x, wind = plant_step(x, np.zeros((1, 2)), LowLevelModel(1.0), dist, wind, 0.01)
    npt.assert_allclose(wind, [[1.0, 0.0]], atol=1e-9)


def test_ou_stationary_variance():
    dist = DisturbanceModel((0.0, 0.0), ou_theta=2.0, ou_sigma=0.8)
    rng = np.random.default_rng(1)
    n, dt = 100_000, 0.05
    d = np.zeros(2)
    # start in the stationary law so no burn-in is needed
    d = dist.stationary_std() * rng.standard_normal(2)
    samples = np.empty((n, 2))
    for i in range(n):
        d = dist.advance(d, dt, rng)
        samples[i] = d
    target = 0.8**2 / (2 * 2.0)
    # estimator std with AR(1) correlation rho = exp(-theta dt)
    rho = math.exp(-2.0 * dt)
    est_std = target * math.sqrt(2 / n * (1 + rho**2) / (1 - rho**2))
    npt.assert_allclose(samples.var(axis=0), target, atol=3 * est_std)


def test_actuation_noise_variance():
    rng = np.random.default_rng(2)
    x = np.zeros((20000, 4))
    out, _ = plant_step(x, np.zeros((20000, 2)), LowLevelModel(0.0), None, np.zeros((20000, 2)), 0.1, rng, 2.0)
    assert out[:, 2:].var() == pytest.approx(4.0 * 0.1, rel=0.03)


# ---------------------------------------------------------------------------
# closed loop


class _Hold:
    def act(self, k, x, aux, rng):
        return x[:, 2:].copy(), {"u": np.zeros((x.shape[0], 2)), "ess": 1.0}


class _Fail:
    def act(self, k, x, aux, rng):
        if k == 3:
            raise RuntimeError("boom")
        return x[:, 2:].copy(), {}


def test_closed_loop_straight_lines():
    x0 = np.array([[0.0, 0.0, 1.0, 0.5], [5.0, 5.0, -1.0, 0.0]])
    log = run_closed_loop(x0, _Hold(), Plant(dt=DT, replan_period=DT, duration_s=2.0))
    assert len(log.t) == 30 and np.all(np.diff(log.t) > 0)
    npt.assert_allclose(log.final_x[:, :2], x0[:, :2] + 2.0 * x0[:, 2:], atol=1e-12)
    assert log.summary["status"] == "ok" and not log.summary["crash"]


def test_closed_loop_crash_ends_episode():
    obs = ObstacleSet.from_corners([[[2.0, -1.0], [3.0, 1.0]]], 0.5)
    log = run_closed_loop(np.array([[0.0, 0.0, 2.0, 0.0]]), _Hold(), Plant(dt=DT, replan_period=DT, duration_s=5.0, obstacles=obs))
    assert log.summary["crash"] and "crash" in log.event_names()
    assert log.final_x[0, 0] >= 1.5 - 1e-12
    assert log.t[-1] < 1.0


def test_closed_loop_abort_keeps_partial_log():
    log = run_closed_loop(np.zeros((1, 4)), _Fail(), Plant(dt=DT, replan_period=DT, duration_s=2.0))
    assert log.summary["status"] == "aborted"
    assert len(log.t) == 3
    assert log.event_names() == ["aborted:RuntimeError"]


def test_closed_loop_capture_and_goal():
    plant = Plant(dt=DT, replan_period=DT, duration_s=5.0, mouse=MouseModel(0.5), mouse_start=(3.0, 0.0), capture_radius=1.0)
    log = run_closed_loop(np.array([[0.0, 0.0, 3.0, 0.0]]), _Hold(), plant)
    assert log.summary["captured"] and log.t[-1] < 2.0
    assert log.mouse.shape == (len(log.t), 2)
    plant = Plant(dt=DT, replan_period=DT, duration_s=5.0, goal=(2.0, 0.0), goal_radius=0.1)
    log = run_closed_loop(np.array([[0.0, 0.0, 1.0, 0.0]]), _Hold(), plant)
    assert log.summary["goal_reached"]


def test_replan_cadence_and_substeps():
    calls = []

    class _Count(_Hold):
        def act(self, k, x, aux, rng):
            calls.append(k)
            return super().act(k, x, aux, rng)

    log = run_closed_loop(np.zeros((1, 4)), _Count(), Plant(dt=0.01, replan_period=0.1, duration_s=1.0))
    assert len(log.t) == 100 and calls == list(range(10))


def test_closed_loop_deterministic_and_csv(tmp_path):
    plant = Plant(dt=DT, replan_period=DT, duration_s=2.0, disturbance=DisturbanceModel((0.5, 0.0), 1.0, 1.0), actuation_sigma=0.3, seed=4)
    a = run_closed_loop(np.array([[0.0, 0.0, 1.0, 0.0]]), _Hold(), plant)
    b = run_closed_loop(np.array([[0.0, 0.0, 1.0, 0.0]]), _Hold(), plant)
    npt.assert_array_equal(a.x, b.x)
    path = tmp_path / "ep.csv"
    a.write_csv(path)
    rows = read_log_csv(path)
    assert len(rows) == len(a.t)
    assert float(rows[-1]["p_E"]) == a.x[-1, 0, 0]


# ---------------------------------------------------------------------------
# formation metrics


def _ring_log(m, t_end=30.0, omega=0.3, radius=7.0):
    t = np.arange(0.0, t_end, DT)
    phase = omega * t[:, None] + 2 * np.pi * np.arange(m) / m
    x = np.stack(
        [radius * np.cos(phase), radius * np.sin(phase), -radius * omega * np.sin(phase), radius * omega * np.cos(phase)],
        axis=-1,
    )
    z = np.zeros((len(t), m, 2))
    return EpisodeLog(t=t, x=x, v_cmd=z, u=z, ess=np.zeros(len(t)), cost=np.zeros(len(t)))


def test_ideal_formation():
    fm = formation_metrics(_ring_log(5), HP)
    assert fm["radial_error"] == pytest.approx(0.0, abs=1e-12)
    assert fm["gap_cv"] == pytest.approx(0.0, abs=1e-12)
    assert fm["mean_speed"] == pytest.approx(2.1)
    assert fm["single_rotation"] and fm["rotation_direction"] == 1.0


def test_displaced_agent_radial_error():
    log = _ring_log(5)
    log.x[:, 2, :2] *= 8.0 / 7.0
    fm = formation_metrics(log, HP)
    assert fm["radial_error"] == pytest.approx(1 / 5, rel=1e-12)
    assert fm["gap_cv"] == pytest.approx(0.0, abs=1e-12)


def test_counter_rotation_detected():
    log = _ring_log(4)
    log.x[:, 1, 2:] *= -1
    assert not formation_metrics(log, HP)["single_rotation"]


def _random_walk_cv(m, seed):
    rng = np.random.default_rng(seed)
    n = 900
    v = np.cumsum(rng.normal(size=(n, m, 2)) * math.sqrt(DT), axis=0)
    p = rng.uniform(-10, 10, size=(m, 2)) + np.cumsum(v * DT, axis=0)
    z = np.zeros((n, m, 2))
    log = EpisodeLog(t=np.arange(n) * DT, x=np.concatenate([p, v], axis=-1), v_cmd=z, u=z, ess=np.zeros(n), cost=np.zeros(n))
    return formation_metrics(log)["gap_cv"]


def test_random_walks_are_rejected():
    wide = np.array([_random_walk_cv(10, s) for s in range(200)])
    assert np.mean(wide > 0.5) >= 0.95
    five = np.array([_random_walk_cv(5, s) for s in range(200)])
    assert np.mean(five > 0.25) >= 0.95


def test_formation_needs_two_agents():
    with pytest.raises(ContractViolation):
        formation_metrics(_ring_log(1))


def test_smoothed_window():
    t = np.arange(0, 10, 1.0)
    assert smoothed(t, t, 9.0, 3.0) == pytest.approx(8.0)
    assert smoothed(t, t, 0.0, 5.0) == 0.0
