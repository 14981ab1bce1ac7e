import json
import math

import numpy as np
import pytest

from gridhail.domain import (ConfigError, DriverTransition, EngineConfig, GridMap,
                             SpatioTemporalState, discount_exponent, discount_factor,
                             load_engine_config, save_engine_config, substream, substream_seed,
                             travel_time)


def test_discount_exponent_zero_duration():
    cfg = EngineConfig()
    assert discount_exponent(0.0, cfg) == 0.0
    assert discount_factor(0.0, cfg) == 1.0


def test_discount_one_unit():
    cfg = EngineConfig(gamma=0.9, discount_time_unit_s=600.0)
    assert discount_factor(600.0, cfg) == pytest.approx(0.9, abs=0)


def test_discount_half_unit_matches_exp_log():
    cfg = EngineConfig(gamma=0.9, discount_time_unit_s=600.0)
    got = discount_factor(300.0, cfg)
    expected = math.exp(0.5 * math.log(0.9))
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(0.94868, abs=1e-5)


def test_discount_negative_duration_rejected():
    with pytest.raises(ValueError):
        discount_exponent(-1.0, EngineConfig())


def test_travel_time_identity_and_adjacent():
    grid = GridMap(10, 10, cell_edge_m=500.0, speed_mps=5.0)
    assert travel_time(3, 3, grid) == 0
    assert travel_time(0, 1, grid) == 100
    assert travel_time(0, 11, grid) == 100  # diagonal neighbor, Chebyshev


def test_travel_time_symmetric_and_triangle():
    grid = GridMap(12, 9, cell_edge_m=400.0, speed_mps=7.0)
    rng = np.random.default_rng(0)
    cells = rng.integers(0, grid.n_cells, size=(1000, 3))
    for a, b, c in cells:
        ab = travel_time(int(a), int(b), grid)
        assert ab == travel_time(int(b), int(a), grid)
        assert travel_time(int(a), int(c), grid) <= ab + travel_time(int(b), int(c), grid)
        assert (ab == 0) == (a == b)


def test_grid_validation():
    with pytest.raises(ConfigError):
        GridMap(0, 5)
    with pytest.raises(ConfigError):
        GridMap(5, 5, cell_edge_m=-1.0)


def test_transition_clock_advances_by_duration():
    s0 = SpatioTemporalState(cell=4, clock=100.0)
    s1 = SpatioTemporalState(cell=9, clock=700.0)
    tr = DriverTransition(s0, "trip", 5.0, s1, 600.0)
    assert tr.to_state.clock == tr.from_state.clock + tr.duration
    with pytest.raises(ValueError):
        DriverTransition(s0, "trip", 5.0, s1, 500.0)
    with pytest.raises(ValueError):
        DriverTransition(s0, "idle", 1.0, s1, 600.0)  # idle carries reward


def test_engine_config_defaults_match_published_values():
    cfg = EngineConfig()
    assert cfg.gamma == 0.9
    assert cfg.omega == 0.2
    assert cfg.reposition_threshold_C == 150
    assert cfg.online_lr_alpha == 0.025
    assert cfg.ope_lr == 3e-4
    assert cfg.lipschitz_lambda == 1e-4
    assert cfg.K_changepoints == 5
    assert cfg.segment_bin_s == 1800.0
    assert cfg.dispatch_round_s == 2.0


def test_engine_config_roundtrip_bit_identical(tmp_path):
    cfg = EngineConfig(gamma=0.87, ope_lr=1.25e-4, seed=123456789)
    path = tmp_path / "engine.json"
    save_engine_config(cfg, path)
    again = load_engine_config(path)
    assert again == cfg
    save_engine_config(again, tmp_path / "engine2.json")
    assert (tmp_path / "engine.json").read_bytes() == (tmp_path / "engine2.json").read_bytes()


def test_engine_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"gamma": 0.9, "turbo": True}))
    with pytest.raises(ConfigError, match="turbo"):
        load_engine_config(path)


def test_engine_config_bounds():
    with pytest.raises(ConfigError):
        EngineConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        EngineConfig(omega=1.5)


def test_substreams_are_stable_and_distinct():
    assert substream_seed(7, "orders") == substream_seed(7, "orders")
    assert substream_seed(7, "orders") != substream_seed(7, "cancellation")
    assert substream_seed(7, "orders") != substream_seed(8, "orders")
    a = substream(7, "orders").random(5)
    b = substream(7, "orders").random(5)
    assert np.array_equal(a, b)
