import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevkit.errors import BevIOError, ValidationError
from bevkit.maps import (
    CLASS_IDS,
    MapInstance,
    PolylineMap,
    clip_polyline,
    direction_class,
    polyline_length,
    rasterize_classes,
    rasterize_polyline,
    resample,
)


@pytest.mark.parametrize(
    "deg,cls",
    [(0, 0), (9.99, 0), (10, 1), (90, 9), (95, 9), (180, 18), (-0.01, 35), (355, 35), (360, 0), (-90, 27)],
)
def test_direction_quantization(deg, cls):
    assert direction_class(math.radians(deg)) == cls


def test_resample_keeps_ends_and_spacing():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.05]])
    s = resample(pts, 0.5)
    np.testing.assert_array_equal(s[0], pts[0])
    np.testing.assert_array_equal(s[-1], pts[-1])
    steps = np.hypot(*np.diff(s, axis=0).T)
    assert np.all(steps <= 0.5 + 1e-12)
    assert len(s) == 6


def test_clip_splits_runs():
    # leaves the box between x=4 and x=6, then comes back
    pts = np.array([[0.0, 0.0], [4.0, 0.0], [5.0, 3.0], [6.0, 0.0], [9.0, 0.0]])
    pieces = clip_polyline(pts, x0=0, x1=10, y0=-1, y1=1)
    assert len(pieces) == 2
    assert pieces[0][0].tolist() == [0.0, 0.0]
    assert pieces[1][-1].tolist() == [9.0, 0.0]
    for p in pieces:
        assert np.all(np.abs(p[:, 1]) <= 1 + 1e-12)


def test_clip_forward_range():
    pts = np.array([[0.0, 0.0], [90.0, 0.0]])
    (piece,) = clip_polyline(pts, x0=30, x1=60)
    assert piece.tolist() == [[30.0, 0.0], [60.0, 0.0]]
    assert clip_polyline(pts, x0=100, x1=120) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 110), st.floats(-25, 25)), min_size=2, max_size=8))
def test_clipped_pieces_stay_inside_and_never_grow(raw):
    pts = np.array(raw)
    pieces = clip_polyline(pts, x0=0, x1=90, y0=-15, y1=15)
    total = sum(polyline_length(p) for p in pieces)
    assert total <= polyline_length(pts) + 1e-9
    for p in pieces:
        assert np.all((p[:, 0] >= -1e-9) & (p[:, 0] <= 90 + 1e-9))
        assert np.all((p[:, 1] >= -15 - 1e-9) & (p[:, 1] <= 15 + 1e-9))


def test_rasterize_straight_line(toy_bev):
    mask = rasterize_polyline([[0.0, 0.1], [90.0, 0.1]], toy_bev)
    row = int(toy_bev.cell_of(0.0, 0.1)[0])
    assert mask[row].all()
    assert mask.sum() == toy_bev.nx


def test_rasterize_dilation(toy_bev):
    mask = rasterize_polyline([[10.0, 0.1], [20.0, 0.1]], toy_bev, radius=1)
    assert mask.sum() == 3 * (mask.any(axis=0).sum())


def test_class_priority(toy_bev):
    line = [[0.0, 0.1], [90.0, 0.1]]
    pmap = PolylineMap([MapInstance("boundary", line), MapInstance("divider", line), MapInstance("crossing", line)])
    raster = rasterize_classes(pmap, toy_bev)
    assert set(np.unique(raster)) == {0, CLASS_IDS["boundary"]}


def test_json_round_trip_and_format():
    pmap = PolylineMap([MapInstance("divider", [[0.0, -0.0001], [1.23456, 2.0]], 0.5)])
    text = pmap.to_json()
    assert "-0.000" not in text
    assert '"points":[[0.000,0.000],[1.235,2.000]]' in text
    back = PolylineMap.from_json(text)
    assert back.instances[0].cls == "divider"
    assert back.to_json() == text


def test_instance_validation():
    with pytest.raises(ValidationError):
        MapInstance("tree", [[0, 0], [1, 1]])
    with pytest.raises(ValidationError):
        MapInstance("divider", [[0, 0], [0, 0]])
    with pytest.raises(ValidationError):
        MapInstance("divider", [[0, 0], [1, 0]], confidence=1.5)


def test_malformed_json_is_io_error():
    with pytest.raises(BevIOError, match="pred.json"):
        PolylineMap.from_json('{"instances": [{"class": "divider"}]}', source="pred.json")
