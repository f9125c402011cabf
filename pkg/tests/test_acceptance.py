"""Acceptance criteria 1 to 10, one test each, each printing a single PASS/FAIL line."""
import os
import subprocess
import sys
import time

import numpy as np

from bevkit import fusion, losses
from bevkit import tensor as T
from bevkit.camera import CameraModel
from bevkit.config import BevConfig, DepthBinning, LossWeights, MatchThresholds, VectorizeConfig
from bevkit.gradcheck import CHECKS, TOL, _attention_params, run_grad_suite
from bevkit.maps import CLASS_NAMES, MapInstance, PolylineMap, resample
from bevkit.metrics import average_precision, chamfer_pred, chamfer_sym, eval_intervals, match_instances, raster_iou
from bevkit.planner import paired_suite, success_rate
from bevkit.synth import (
    NoiseModel,
    RoadSpec,
    SceneSpec,
    degrade_prediction,
    label_rasters,
    random_spec,
    scene_map,
)
from bevkit.vectorize import dbscan, vectorize_logits

from oracles import (
    brute_chamfer,
    naive_attention,
    naive_dbscan,
    naive_integer_warp,
    naive_lift_splat,
    same_partition,
)

TOY = BevConfig.toy()
PAPER_BEV = BevConfig()


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def line(x0, x1, y, conf=1.0, n=50):
    return MapInstance("divider", np.stack([np.linspace(x0, x1, n), np.full(n, float(y))], axis=1), conf)


def test_criterion_01_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = run_grad_suite(seed=0, instances=5)
    elapsed = time.perf_counter() - t0
    per_op = {name: len({r.instance for r in results if r.op == name}) for name in CHECKS}
    worst = max(r.max_abs_err for r in results)
    ok = all(r.passed for r in results) and min(per_op.values()) >= 5 and elapsed < 60.0
    report(capsys, 1, ok, f"{len(per_op)} ops, {len(results)} checks, max err {worst:.2e} < {TOL}, {elapsed:.1f} s")


def test_criterion_02_oracle_equivalence(capsys):
    rng = np.random.default_rng(2)
    failures = []

    bev = BevConfig(x_min=0.0, x_max=12.0, y_min=-6.0, y_max=6.0, resolution=1.5)
    bins = DepthBinning(2.0, 10.0, 2.0)
    for focal in (4.0, 6.0, 9.0):
        cam = CameraModel.forward_facing(image_w=16, image_h=8, focal=focal)
        for _ in range(5):
            F = rng.standard_normal((2, 4, 3))
            D = T.softmax_lastdim(rng.standard_normal((2, 4, bins.num_bins)) * 2.0)
            ref = naive_lift_splat(F, D, cam, bev, bins)
            if not ref.any() or fusion.lift_splat(F, D, cam, bev, bins).tobytes() != ref.tobytes():
                failures.append("lift_splat")

    for d_k in (2, 3, 5):
        B, F = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 4, 2))
        p = _attention_params(rng, 3, 2, d_k, 2)
        if np.max(np.abs(fusion.cross_attend(B, F, p) - naive_attention(B, F, p))) >= 1e-5:
            failures.append("cross_attend")

    for dtype in (np.float32, np.float64):
        for _ in range(10):
            C = rng.standard_normal((6, 7, 3)).astype(dtype)
            flow = rng.integers(-3, 4, size=(6, 7, 2)).astype(dtype)
            if fusion.warp_bev(C, flow).tobytes() != naive_integer_warp(C, flow).tobytes():
                failures.append("warp")

    for _ in range(100):
        centers = rng.uniform(-5, 5, size=(rng.integers(1, 4), 2))
        pts = centers[rng.integers(0, len(centers), size=40)] + rng.standard_normal((40, 2)) * 0.6
        eps, min_pts = float(rng.uniform(0.5, 1.5)), int(rng.integers(2, 6))
        if not same_partition(dbscan(pts, eps, min_pts).labels, naive_dbscan(pts, eps, min_pts)):
            failures.append("dbscan")

    for _ in range(50):
        p = rng.uniform(-20, 20, size=(int(rng.integers(1, 40)), 2))
        g = rng.uniform(-20, 20, size=(int(rng.integers(1, 40)), 2))
        if chamfer_pred(p, g) != brute_chamfer(p, g):
            failures.append("chamfer")

    detail = "lift_splat 15, cross_attend 3, warp 20, dbscan 100, chamfer 50 instances"
    report(capsys, 2, not failures, detail if not failures else f"mismatches: {sorted(set(failures))}")


def test_criterion_03_zero_flow_identity(capsys):
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(100):
        h, w, c = (int(v) for v in rng.integers(1, 9, size=3))
        C = (rng.standard_normal((h, w, c)) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        C[rng.random(C.shape) < 0.1] = -0.0
        if fusion.warp_bev(C, np.zeros((h, w, 2), np.float32)).tobytes() != C.tobytes():
            bad += 1
    report(capsys, 3, bad == 0, f"{100 - bad}/100 random tensors unchanged bit for bit")


def test_criterion_04_metric_protocol(capsys):
    checks = {}
    spec = SceneSpec(road=RoadSpec("straight"), lane_count=2, crossing_positions=(15.0, 45.0, 75.0))
    gt = scene_map(spec, PAPER_BEV)[0]
    rows = eval_intervals(gt, gt, PAPER_BEV).rows
    checks["gt-vs-gt"] = all(
        r["num_gt"] > 0 and (r["iou"], r["cd_pred"], r["ap"]) == (1.0, 0.0, 1.0) for r in rows
    )
    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[1:4, 1:4] = True
    b[2:5, 1:4] = True
    checks["iou 0.5"] = raster_iou(a, b) == 0.5
    ap = average_precision([(0.9, True), (0.8, False), (0.7, True)], 2)
    checks["ap"] = abs(ap - 0.8333) <= 1e-4
    gts = [line(10, 40, 0.0)]
    far = match_instances([line(10, 40, 2.0)], gts, MatchThresholds(), PAPER_BEV)
    near = match_instances([line(10, 40, 0.15)], gts, MatchThresholds(), PAPER_BEV)
    checks["gate"] = not far[0].tp and near[0].tp
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 4, not failed, f"{len(rows)} gt-vs-gt rows perfect, IoU 0.5, AP {ap:.4f}, 2.0 m rejected"
           if not failed else f"failed: {failed}")


def test_criterion_05_partial_coverage_pathology(capsys):
    p = resample(line(0.0, 27.0, 0.0).points, 0.15)
    g = resample(line(0.0, 90.0, 0.0).points, 0.15)
    cd_pred, cd_sym = chamfer_pred(p, g), chamfer_sym(p, g)
    report(capsys, 5, cd_pred < 0.1 and cd_sym > 1.0, f"CD_pred {cd_pred:.4f} < 0.1, CD_sym {cd_sym:.3f} > 1.0")


def test_criterion_06_loss_anchors(capsys):
    w = LossWeights()
    checks = {}

    def pair(center, offset):
        return np.array([[center[0] + offset, center[1]], [center[0] - offset, center[1]]])

    emb = pair((0.0, 0.0), w.delta_v)[None]
    r = losses.instance_loss(emb, np.array([[1, 1]]), w)
    checks["var hinge"] = r.value == 0.0 and not r.grads["embeddings"].any()
    emb = np.concatenate([pair((0.0, 0.0), 0.1), pair((2 * w.delta_d, 0.0), 0.1)])[None]
    r = losses.instance_loss(emb, np.array([[1, 1, 2, 2]]), w)
    checks["dist hinge"] = r.value == 0.0 and not r.grads["embeddings"].any()
    total = losses.total_loss({"dep": 1.0, "seg": 1.0, "ins": 1.0, "dir": 1.0}, w).value
    checks["total"] = abs(total - 3.2) < 1e-12

    rng = np.random.default_rng(6)
    labels = rng.integers(-1, 36, size=(5, 6))
    labels[0, 0], labels[1, 1] = 4, -1
    g = losses.direction_loss(rng.standard_normal((5, 6, 36)), labels).grads["dir_logits"]
    checks["dir mask"] = np.all(g[labels == -1] == 0.0) and np.any(g[labels != -1] != 0.0)
    sup = rng.random((5, 6)) < 0.5
    sup[0, 0], sup[1, 1] = True, False
    t = np.zeros((5, 6, 7))
    hot = rng.integers(0, 7, size=(5, 6))
    t[sup, hot[sup]] = 1.0
    g = losses.depth_focal_loss(rng.standard_normal((5, 6, 7)), t).grads["depth_logits"]
    checks["focal mask"] = np.all(g[~sup] == 0.0) and np.any(g[sup] != 0.0)

    failed = [k for k, v in checks.items() if not v]
    report(capsys, 6, not failed, f"hinges zero, total {total:.12g}, masked grads exactly 0"
           if not failed else f"failed: {failed}")


def test_criterion_07_clean_degrade_then_vectorize(capsys):
    worst_cd, bad = 0.0, []
    for seed in range(20):
        gt, _ = scene_map(random_spec(seed), TOY)
        seg, inst, dirs = label_rasters(gt, TOY)
        out = degrade_prediction({"seg": seg, "instance": inst, "direction": dirs}, TOY, seed=seed)
        pred = vectorize_logits(out["seg_logits"], out["embeddings"], out["dir_logits"], VectorizeConfig(), TOY)
        for name in CLASS_NAMES:
            P, G = pred.of_class(name), gt.of_class(name)
            if len(P) != len(G):
                bad.append((seed, name, len(P), len(G)))
            for q in P:
                cds = [chamfer_pred(resample(q.points, 0.15), resample(h.points, 0.15)) for h in G]
                worst_cd = max(worst_cd, min(cds) if cds else float("inf"))
    ok = not bad and worst_cd < TOY.resolution
    report(capsys, 7, ok, f"20 scenes, counts match, worst CD_pred {worst_cd:.3f} < {TOY.resolution}"
           if ok else f"count mismatches {bad[:5]}, worst CD_pred {worst_cd:.3f}")


def test_criterion_08_planner_paired_suite(capsys):
    t0 = time.perf_counter()
    full, short = paired_suite(30, TOY, seed=0)
    full_rate, _ = success_rate(full, TOY)
    short_rate, _ = success_rate(short, TOY)
    elapsed = time.perf_counter() - t0
    ok = full_rate == 1.0 and short_rate <= 0.7 and elapsed < 120.0
    report(capsys, 8, ok, f"full {full_rate:.3f}, truncated {short_rate:.3f} <= 0.7, {elapsed:.1f} s")


def test_criterion_09_range_knee_ordering(capsys):
    spec = SceneSpec(road=RoadSpec("straight"), lane_count=2, crossing_positions=(15.0, 45.0, 75.0))
    gt, _ = scene_map(spec, TOY)
    seg, inst, dirs = label_rasters(gt, TOY)
    out = degrade_prediction({"seg": seg, "instance": inst, "direction": dirs}, TOY, NoiseModel(dropout=0.9, knee=30.0))
    rep = eval_intervals(gt, gt, TOY, pred_raster=np.argmax(out["seg_logits"], axis=-1), gt_raster=seg)
    ious = {n: [rep.row(n, k)["iou"] for k in ("0-30", "30-60", "60-90")] for n in CLASS_NAMES}
    ok = all(v[0] > v[1] > v[2] for v in ious.values())
    report(capsys, 9, ok, "; ".join(f"{n} " + "/".join(f"{x:.3f}" for x in v) for n, v in ious.items()))


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_determinism(capsys, tmp_path):
    trees = []
    for k, threads in enumerate(("1", "4", "1")):
        root = tmp_path / f"run{k}"
        env = dict(os.environ, BEVKIT_THREADS=threads)
        cmds = [
            ["gen-synthetic", "--seed", "11", "--out", root / "scene"],
            ["pipeline", root / "scene", "--seed", "11", "--out", root / "run"],
            ["eval", root / "run" / "pred_map.json", root / "scene" / "gt_map.json", "--out", root / "eval"],
        ]
        for cmd in cmds:
            proc = subprocess.run([sys.executable, "-m", "bevkit.cli", *map(str, cmd)], env=env, capture_output=True)
            assert proc.returncode == 0, proc.stderr
        trees.append(tree_bytes(root))
    ok = trees[0] == trees[1] == trees[2] and len(trees[0]) > 0
    report(capsys, 10, ok, f"3 reruns (threads 1, 4, 1), {len(trees[0])} files byte-identical")
