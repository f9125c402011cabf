from pathlib import Path

import numpy as np
import pytest

from bevkit.config import BevConfig
from bevkit.errors import ShapeError
from bevkit.maps import MapInstance, PolylineMap
from bevkit.render import (
    BACKGROUND,
    PALETTE,
    bev_to_image,
    decode_pnm,
    encode_pgm,
    encode_ppm,
    render_map,
    render_raster,
    write_map_ppm,
    write_pgm,
)
from bevkit.synth import RoadSpec, SceneSpec, scene_map

BEV = BevConfig.toy()
GOLDEN = Path(__file__).parent / "data" / "curve_gt.ppm"


def golden_map():
    spec = SceneSpec(road=RoadSpec("curve", radius=120.0), lane_count=2, crossing_positions=(15.0, 45.0, 75.0))
    return scene_map(spec, BEV)[0]


def test_golden_render(tmp_path):
    out = tmp_path / "map.ppm"
    write_map_ppm(out, golden_map(), BEV)
    assert out.read_bytes() == GOLDEN.read_bytes()


def test_three_classes_give_three_colours_plus_background():
    img = render_map(golden_map(), BEV)
    colours = {tuple(c) for c in img.reshape(-1, 3).tolist()}
    assert colours == {BACKGROUND, PALETTE["boundary"], PALETTE["divider"], PALETTE["crossing"]}


def test_orientation_forward_up_left_left():
    bev = BevConfig(x_min=0.0, x_max=4.0, y_min=-2.0, y_max=2.0, resolution=1.0)
    grid = np.zeros(bev.shape)
    grid[3, 0] = 1.0  # near (x = 0.5) and on the left (y = 1.5)
    img = bev_to_image(grid)
    assert img[3, 0] == 1.0  # bottom-left of the picture
    pmap = PolylineMap([MapInstance("divider", np.array([[0.2, 1.5], [3.8, 1.5]]))])
    rgb = render_map(pmap, bev)
    assert (rgb[:, 0] == PALETTE["divider"]).all()
    assert (rgb[:, 1:] == BACKGROUND).all()


def test_all_zero_raster_is_black(tmp_path):
    write_pgm(tmp_path / "z.pgm", np.zeros(BEV.shape))
    img = decode_pnm((tmp_path / "z.pgm").read_bytes())
    assert img.shape == (BEV.nx, BEV.ny) and not img.any()


def test_pgm_scaling_and_argmax():
    data = encode_pgm(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert data.startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(decode_pnm(data), [[0, 64], [128, 255]])
    logits = np.zeros((2, 2, 3))
    logits[0, 1, 2] = 1.0
    np.testing.assert_array_equal(render_raster(logits, bev_oriented=False), [[0, 2], [0, 0]])


def test_encoders_reject_bad_shapes():
    with pytest.raises(ShapeError):
        encode_pgm(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        encode_ppm(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        decode_pnm(b"P4\n1 1\n255\n\x00")
