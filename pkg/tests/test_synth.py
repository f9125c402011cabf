import numpy as np
import pytest

from bevkit.camera import CameraModel
from bevkit.config import BevConfig, DepthBinning, VectorizeConfig
from bevkit.errors import SpecError
from bevkit.maps import CLASS_IDS, CLASS_NAMES, polyline_length, rasterize_classes
from bevkit.metrics import eval_intervals
from bevkit.synth import (
    LIDAR_HEIGHT,
    LidarSpec,
    NoiseModel,
    NoiseSpec,
    RoadSpec,
    SceneSpec,
    centerline,
    degrade_prediction,
    gen_scene,
    instance_embedding,
    label_rasters,
    random_spec,
    read_scene,
    scene_map,
    simulate_lidar,
    write_scene,
)
from bevkit.vectorize import vectorize_logits

BEV = BevConfig.toy()
CAM = CameraModel.forward_facing()


def test_straight_two_lane_layout():
    gt, center = scene_map(SceneSpec(road=RoadSpec("straight"), lane_count=2), BEV)
    assert len(gt.of_class("boundary")) == 2
    assert len(gt.of_class("divider")) == 1
    assert gt.of_class("crossing") == []
    for inst in gt.instances:
        assert polyline_length(inst.points) == pytest.approx(90.0, abs=1e-6)
    ys = sorted(float(i.points[0, 1]) for i in gt.instances)
    assert ys == pytest.approx([-3.5, 0.0, 3.5])
    assert np.all(np.abs(center[:, 1]) < 1e-9)


def test_crossings_span_the_road():
    gt, _ = scene_map(SceneSpec(lane_count=3, crossing_positions=(20.0, 50.0)), BEV)
    cross = gt.of_class("crossing")
    assert len(cross) == 2
    for inst, x in zip(cross, (20.0, 50.0)):
        assert np.allclose(inst.points[:, 0], x)
        assert polyline_length(inst.points) == pytest.approx(3 * 3.5)


def test_curve_keeps_constant_radius():
    s, cx, cy, th = centerline(RoadSpec("curve", radius=100.0), length=60.0)
    # a left curve of radius R starting at the origin heading +x has its centre at (0, R)
    np.testing.assert_allclose(np.hypot(cx, cy - 100.0), 100.0, atol=1e-3)
    np.testing.assert_allclose(th[-1], 60.0 / 100.0, atol=1e-9)


@pytest.mark.parametrize("angle", [90.0, -90.0])
def test_right_angle_turn_sweeps_nine_direction_boundaries(angle):
    gt, _ = scene_map(SceneSpec(road=RoadSpec("turn", angle=angle)), BEV)
    _, inst, dirs = label_rasters(gt, BEV)
    for k in np.unique(inst[inst > 0]):
        classes = set(dirs[inst == k].tolist())
        # 0 to 90 degrees crosses nine 10-degree class boundaries: ten classes end to end
        assert len(classes) == 10
        expected = set(range(0, 10)) if angle > 0 else {0} | set(range(27, 36))
        assert classes == expected


def test_labels_are_consistent_with_the_map():
    for seed in range(5):
        spec = random_spec(seed)
        scene = gen_scene(spec, BEV, CAM)
        seg, inst, dirs = (scene.labels[k] for k in ("seg", "instance", "direction"))
        assert np.array_equal(seg, rasterize_classes(scene.gt_map, BEV))
        fg = seg > 0
        assert np.all(dirs[fg] >= 0) and np.all(dirs[~fg] == -1)
        assert np.all(inst[fg] > 0) and np.all(inst[~fg] == 0)
        # each instance id names exactly one class
        for k in np.unique(inst[fg]):
            assert len(np.unique(seg[inst == k])) == 1
            assert seg[inst == k][0] == CLASS_IDS[scene.gt_map.instances[k - 1].cls]


def test_lidar_stays_short_while_camera_sees_far():
    spec = SceneSpec(lidar=LidarSpec(max_ground_range=30.0))
    scene = gen_scene(spec, BEV, CAM)
    cloud = scene.cloud.astype(np.float64)
    assert np.all(np.hypot(cloud[:, 0], cloud[:, 1]) <= 30.0 + 1e-3)
    np.testing.assert_allclose(cloud[:, 2], -LIDAR_HEIGHT, atol=1e-5)
    depth = scene.labels["depth"]
    assert depth.max() > 85.0 and depth.max() < DepthBinning().d_max


def test_lidar_noise_and_dropout():
    rng = np.random.default_rng(0)
    clean = simulate_lidar(SceneSpec(), rng)
    dropped = simulate_lidar(SceneSpec(noise=NoiseSpec(dropout_prob=0.5)), np.random.default_rng(0))
    assert 0.4 < len(dropped) / len(clean) < 0.6
    assert len(simulate_lidar(SceneSpec(noise=NoiseSpec(dropout_prob=1.0)), rng)) == 0
    noisy = simulate_lidar(SceneSpec(noise=NoiseSpec(depth_sigma=0.5)), np.random.default_rng(0))
    assert noisy.shape == clean.shape and not np.allclose(noisy, clean)


def test_same_seed_same_bytes(tmp_path):
    spec = random_spec(3)
    for d in ("a", "b"):
        write_scene(gen_scene(spec, BEV, CAM), tmp_path / d, CAM)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    scene, cam = read_scene(tmp_path / "a")
    assert cam == CAM and scene.spec == spec


def test_spec_validation():
    with pytest.raises(SpecError):
        SceneSpec(lane_width=0.0)
    with pytest.raises(SpecError):
        LidarSpec(max_ground_range=120.0)
    with pytest.raises(SpecError):
        RoadSpec("zigzag")
    with pytest.raises(SpecError):
        SceneSpec.from_dict({"road": {"kind": "straight"}, "lanes": 3})
    spec = random_spec(9)
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_instance_embeddings_are_well_separated():
    e = instance_embedding(np.arange(0, 20), 8)
    assert not e[0].any()
    pairs = [np.linalg.norm(e[i] - e[j]) for i in range(1, 20) for j in range(i + 1, 20)]
    assert min(pairs) >= 5.0 * np.sqrt(2) - 1e-9


def test_full_dropout_gives_empty_prediction():
    gt, _ = scene_map(random_spec(1), BEV)
    seg, inst, dirs = label_rasters(gt, BEV)
    out = degrade_prediction({"seg": seg, "instance": inst, "direction": dirs}, BEV, NoiseModel(dropout=1.0))
    assert np.all(np.argmax(out["seg_logits"], axis=-1) == 0)
    pred = vectorize_logits(out["seg_logits"], out["embeddings"], out["dir_logits"], VectorizeConfig(), BEV)
    assert pred.instances == []


def knee_ious(noise, seed=0):
    spec = SceneSpec(road=RoadSpec("straight"), lane_count=2, crossing_positions=(15.0, 45.0, 75.0))
    gt, _ = scene_map(spec, BEV)
    seg, inst, dirs = label_rasters(gt, BEV)
    out = degrade_prediction({"seg": seg, "instance": inst, "direction": dirs}, BEV, noise, seed=seed)
    pred_raster = np.argmax(out["seg_logits"], axis=-1)
    report = eval_intervals(gt, gt, BEV, pred_raster=pred_raster, gt_raster=seg)
    return {name: [report.row(name, k)["iou"] for k in ("0-30", "30-60", "60-90")] for name in CLASS_NAMES}


def test_range_knee_degrades_with_distance():
    for name, ious in knee_ious(NoiseModel(dropout=0.9, knee=30.0)).items():
        assert ious[0] == 1.0, name
        assert ious[0] > ious[1] > ious[2], name


def test_lateral_jitter_and_confidence_decay():
    gt, _ = scene_map(SceneSpec(), BEV)
    seg, inst, dirs = label_rasters(gt, BEV)
    labels = {"seg": seg, "instance": inst, "direction": dirs}
    jittered = degrade_prediction(labels, BEV, NoiseModel(lateral_sigma=1.0), seed=4)
    moved = np.argmax(jittered["seg_logits"], axis=-1)
    assert not np.array_equal(moved, seg)
    assert np.array_equal((moved > 0).sum(axis=0) > 0, (seg > 0).sum(axis=0) > 0)
    decayed = degrade_prediction(labels, BEV, NoiseModel(confidence_decay=0.5))["seg_logits"].max(axis=(0, 2))
    assert decayed[0] > decayed[-1] and decayed[-1] == pytest.approx(8.0 * (1 - 0.5 * 89.625 / 90), rel=1e-6)
    again = degrade_prediction(labels, BEV, NoiseModel(lateral_sigma=1.0), seed=4)
    assert all(np.array_equal(jittered[k], again[k]) for k in jittered)
