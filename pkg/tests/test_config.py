import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevkit.config import (
    BevConfig,
    DepthBinning,
    DwaConfig,
    IntervalSpec,
    LossWeights,
    MatchThresholds,
    ModelConfig,
    RunConfig,
)
from bevkit.errors import ConfigError


def test_paper_scale_grid():
    bev = BevConfig()
    assert bev.shape == (200, 600)
    assert (bev.x_max - bev.x_min, bev.y_max - bev.y_min) == (90, 30)


def test_toy_grid_keeps_extent_and_aspect():
    bev = BevConfig.toy()
    assert bev.shape == (40, 120)
    assert bev.nx / bev.ny == BevConfig().nx / BevConfig().ny


def test_cell_mapping_round_trips():
    bev = BevConfig.toy()
    x, y = bev.cell_center(3, 7)
    r, c = bev.cell_of(x, y)
    assert (int(r), int(c)) == (3, 7)
    assert bev.cell_of(0.0, -15.0) == (0.0, 0.0)


def test_depth_bins():
    bins = DepthBinning()
    assert bins.num_bins == 88
    assert bins.centers()[0] == 2.5
    assert bins.centers()[-1] == 89.5
    with pytest.raises(ConfigError):
        DepthBinning(2.0, 90.0, 0.7)


def test_loss_weight_defaults():
    w = LossWeights()
    assert (w.lambda_dep, w.lambda_seg, w.lambda_ins, w.lambda_dir) == (1.0, 1.0, 1.0, 0.2)
    assert (w.alpha, w.beta, w.delta_v, w.delta_d, w.gamma) == (1.0, 1.0, 0.5, 3.0, 2.0)


def test_threshold_parsing():
    t = MatchThresholds.parse("cd=1.0,iou=0.1")
    assert (t.cd_max, t.iou_min) == (1.0, 0.1)
    assert MatchThresholds.parse("iou=0.3").cd_max == 1.0
    with pytest.raises(ConfigError):
        MatchThresholds.parse("chamfer=2")
    with pytest.raises(ConfigError):
        MatchThresholds.parse("cd=abc")


def test_intervals():
    assert IntervalSpec().intervals == [(0, 30), (30, 60), (60, 90)]


def test_dwa_validation():
    with pytest.raises(ConfigError):
        DwaConfig(dt=0.5, horizon=0.2)
    with pytest.raises(ConfigError):
        DwaConfig(v_max=0)


def test_model_requires_stride_four():
    with pytest.raises(ConfigError):
        ModelConfig(image_h=30)


def test_run_config_round_trip_is_identity():
    cfg = RunConfig()
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_run_config_rejects_unknown_keys():
    d = RunConfig().to_dict()
    d["bev"]["colour"] = "red"
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nonsense": 1})


def test_run_config_rejects_bad_types():
    d = RunConfig().to_dict()
    d["planner"]["v_samples"] = True
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError):
        RunConfig.from_json("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")


def test_run_config_partial_json_uses_defaults():
    cfg = RunConfig.from_json(json.dumps({"thresholds": {"cd_max": 2.0}}))
    assert cfg.thresholds.cd_max == 2.0
    assert cfg.bev == BevConfig.toy()


@settings(max_examples=30, deadline=None)
@given(cd=st.floats(0.1, 10), iou=st.floats(0.01, 0.9), vmax=st.floats(0.5, 20))
def test_config_round_trip_property(cd, iou, vmax):
    cfg = RunConfig(thresholds=MatchThresholds(cd, iou), planner=DwaConfig(v_max=vmax))
    assert RunConfig.from_json(cfg.to_json()) == cfg
