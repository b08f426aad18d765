from __future__ import annotations

from importlib import resources

import pytest

from picontrol.config import ConfigError, apply_overrides, dump_scenario, load_scenario, parse_scenario

MINIMAL = """
name: hp
kind: holding_pattern
duration_s: 10
seeds: [0]
agents:
  M: 3
"""


def test_minimal_file_gets_defaults():
    cfg = parse_scenario(MINIMAL)
    assert cfg.controllers == ["pi"]
    assert cfg.agents.init == "random"
    assert cfg.cost.v_min == 1.0 and cfg.cost.v_max == 3.0 and cfg.cost.d == 7.0 and cfg.cost.C_hit == 20.0
    assert cfg.pi.n_samples == 1000 and cfg.pi.lam == 1.0 and cfg.pi.replan_hz == 15
    assert cfg.dynamics.plant_dt_s == pytest.approx(1 / 15)
    assert cfg.sim.capture_radius == 1.0
    assert cfg.low_level.u_max == 5.0
    assert cfg.ilqg.step_size == 0.005
    assert not cfg.disturbance.enabled


def test_speed_bounds_error_names_both_fields():
    with pytest.raises(ConfigError) as err:
        parse_scenario(MINIMAL + "cost:\n  v_min: 4\n  v_max: 3\n")
    assert "v_min" in str(err.value) and "v_max" in str(err.value)


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match=r"pi\.n_sample"):
        parse_scenario(MINIMAL + "pi:\n  n_sample: 10\n")


def test_invariant_violation_names_field_path():
    with pytest.raises(ConfigError, match=r"pi\.sigma_u"):
        parse_scenario(MINIMAL + "pi:\n  sigma_u: -1\n")


def test_parse_error_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_scenario("name: x\nkind: drunken\nseeds: a: b\nduration_s: 5\n")


def test_top_level_must_be_mapping():
    with pytest.raises(ConfigError):
        parse_scenario("- 1\n- 2\n")


def test_scenario_kind_requirements():
    with pytest.raises(ConfigError, match="goal"):
        parse_scenario("name: x\nkind: drunken\nduration_s: 5\nseeds: [0]\nagents: {M: 1, init: explicit, positions: [[0, 0]]}\n")
    with pytest.raises(ConfigError, match="iLQG"):
        parse_scenario(MINIMAL.replace("holding_pattern", "cat_mouse") + "controllers: [pi, ilqg]\n")


def test_explicit_positions_count_checked():
    with pytest.raises(ConfigError):
        parse_scenario(MINIMAL + "  init: explicit\n  positions: [[0, 0]]\n")


def test_lambda_key_alias():
    cfg = parse_scenario(MINIMAL + "pi:\n  lambda: 0.25\n")
    assert cfg.pi.lam == 0.25
    assert "lambda" in cfg.to_dict()["pi"]


def test_round_trip():
    cfg = parse_scenario(MINIMAL + "grid:\n  - label: a\n    set: {pi.lambda: 2.0}\n")
    again = parse_scenario(dump_scenario(cfg))
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_changes_with_content():
    a = parse_scenario(MINIMAL)
    b = parse_scenario(MINIMAL.replace("duration_s: 10", "duration_s: 11"))
    assert a.digest() != b.digest()


def test_grid_points_apply_overrides():
    cfg = parse_scenario(
        MINIMAL + "grid:\n  - label: lo\n    set: {pi.lambda: 0.1, pi.sigma_u: 0.5}\n  - label: hi\n    set: {pi.lambda: 10}\n"
    )
    pts = dict(cfg.points())
    assert list(pts) == ["lo", "hi"]
    assert pts["lo"].pi.lam == 0.1 and pts["lo"].pi.sigma_u == 0.5
    assert pts["hi"].pi.lam == 10 and pts["hi"].pi.sigma_u == 1.0
    assert pts["lo"].grid == []


def test_no_grid_gives_single_base_point():
    labels = [label for label, _ in parse_scenario(MINIMAL).points()]
    assert labels == ["base"]


def test_grid_labels_unique():
    with pytest.raises(ConfigError):
        parse_scenario(MINIMAL + "grid:\n  - {label: a, set: {}}\n  - {label: a, set: {}}\n")


def test_override_unknown_key():
    cfg = parse_scenario(MINIMAL)
    with pytest.raises(ConfigError, match="unknown key"):
        apply_overrides(cfg, {"pi.temperature": 1.0})
    with pytest.raises(ConfigError, match="no block"):
        apply_overrides(cfg, {"solver.lambda": 1.0})


@pytest.mark.parametrize(
    "name",
    ["cat_mouse", "drunken", "drunken_wind", "drunken_wind_sweep", "holding_pattern", "holding_pattern_samples", "lq_oracle"],
)
def test_shipped_configs_validate(name):
    path = resources.files("picontrol") / "configs" / f"{name}.yaml"
    cfg = load_scenario(path)
    assert cfg.name
    assert all(label for label, _ in cfg.points())
