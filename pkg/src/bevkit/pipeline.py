"""Command implementations: each reads inputs, does one job, writes its artifacts atomically."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import fusion
from .camera import SENTINEL, complete_depth, one_hot_depth_map, project_points
from .config import BevConfig, RunConfig
from .errors import BevIOError, LossError, NumericError, UsageError, ValidationError
from .gradcheck import run_grad_suite
from .io import _read, atomic_write_text, load_btf, load_params, save_btf, save_params
from .losses import depth_focal_loss, direction_loss, instance_loss, seg_loss, total_loss
from .maps import PolylineMap
from .metrics import eval_intervals
from .planner import PlanScene, RobotState, paired_suite, success_rate
from .render import write_map_ppm, write_pgm
from .synth import SceneSpec, gen_scene, random_spec, read_scene, write_scene
from .camera import CameraModel
from .tensor import softmax_lastdim
from .vectorize import vectorize_logits

log = logging.getLogger(__name__)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _finite(v: float) -> float:
    if not math.isfinite(v):
        raise NumericError(f"non-finite value {v}")
    return round(float(v), 9)


def default_camera(cfg: RunConfig) -> CameraModel:
    return CameraModel.forward_facing(image_w=cfg.model.image_w, image_h=cfg.model.image_h)


# ---------------------------------------------------------------- gen-synthetic


def cmd_gen_synthetic(cfg: RunConfig, out_dir, spec_path=None, seed: int = 0) -> Path:
    if spec_path is not None:
        try:
            spec = SceneSpec.from_dict(json.loads(_read(spec_path)))
        except json.JSONDecodeError as exc:
            raise BevIOError(f"{spec_path}: invalid JSON: {exc}") from exc
    else:
        spec = random_spec(seed)
    out = Path(out_dir)
    cam = default_camera(cfg)
    write_scene(gen_scene(spec, cfg.bev, cam, cfg.bins), out, cam)
    atomic_write_text(out / "spec.json", _json(spec.to_dict()))
    return out


def cmd_gen_plan_suite(cfg: RunConfig, out_dir, count: int, seed: int = 0, truncate_at: float = 30.0) -> Path:
    """Paired planning scenes: full-range and truncated maps sharing starts and goals."""
    out = Path(out_dir)
    full, short = paired_suite(count, cfg.bev, seed=seed, truncate_at=truncate_at)
    for tag, scenes in (("full", full), (f"trunc{truncate_at:g}", short)):
        entries = []
        for i, sc in enumerate(scenes):
            name = f"maps/{tag}_{i:03d}.json"
            (out / "maps").mkdir(parents=True, exist_ok=True)
            atomic_write_text(out / name, sc.pmap.to_json())
            entries.append({
                "map_file": name,
                "goal": [round(sc.goal[0], 6), round(sc.goal[1], 6)],
                "start": {"x": round(sc.start.x, 6), "y": round(sc.start.y, 6), "heading": round(sc.start.heading, 9)},
            })
        atomic_write_text(out / f"scenes_{tag}.json", _json(entries))
    return out


# ---------------------------------------------------------------- pipeline


def camera_input(image, sparse_depth, d_max: float) -> np.ndarray:
    """Image channels plus a sparse depth channel scaled to [0, 1] (0 where empty)."""
    d = np.asarray(sparse_depth, dtype=np.float32)
    depth = np.where(d > 0, d / np.float32(d_max), np.float32(0.0)).astype(np.float32)
    return np.concatenate([np.asarray(image, np.float32), depth[..., None]], axis=-1)


def run_forward(scene, cam, params, cfg: RunConfig):
    """Full forward pass plus losses; returns (artifacts dict, loss dict)."""
    m = cfg.model
    bins = cfg.bins
    sparse = project_points(scene.cloud, cam)
    try:
        dense = complete_depth(sparse)
        dense_vals = dense.values
    except NumericError:
        dense = None
        dense_vals = np.full_like(sparse.values, SENTINEL)
    targets = (
        one_hot_depth_map(dense, bins, m.feat_w, m.feat_h)
        if dense is not None
        else np.zeros((m.feat_h, m.feat_w, bins.num_bins), np.float32)
    )
    image = camera_input(scene.image, sparse.values, bins.d_max)
    F, depth_logits = fusion.camera_stem(image, params, bins.num_bins)
    D = softmax_lastdim(depth_logits)
    pillars = fusion.lidar_pillar_features(scene.cloud, cfg.bev)
    L = fusion.lidar_stem(pillars, params)
    inter, _ = fusion.fusion_core_vjp(F, D, L, params, cam, cfg.bev, bins)
    seg, emb, dirs = fusion.map_heads(inter["fused"], params)

    labels = scene.labels
    parts = {
        "dep": depth_focal_loss(depth_logits, targets, cfg.loss.gamma),
        "seg": seg_loss(seg, labels["seg"]),
        "dir": direction_loss(dirs, labels["direction"]),
    }
    try:
        parts["ins"] = instance_loss(emb, labels["instance"], cfg.loss)
    except LossError:
        parts["ins"] = 0.0
    total = total_loss(parts, cfg.loss)
    loss_report = {k: _finite(v.value if hasattr(v, "value") else v) for k, v in parts.items()}
    loss_report["total"] = _finite(total.value)

    artifacts = {
        "depth_sparse": sparse.values,
        "depth_dense": dense_vals,
        "depth_targets": targets,
        "camera_input": image,
        "F": F,
        "D": D,
        "pillars": pillars,
        "L": L,
        **inter,
        "seg_logits": seg,
        "embeddings": emb,
        "dir_logits": dirs,
    }
    return artifacts, loss_report


def cmd_pipeline(cfg: RunConfig, scene_dir, out_dir, params_dir=None, seed: int = 0, check_grads: bool = False) -> dict:
    scene, cam = read_scene(scene_dir)
    if scene.image.shape[:2] != (cfg.model.image_h, cfg.model.image_w):
        raise ValidationError(
            f"scene image {scene.image.shape[:2]} does not match model input "
            f"{(cfg.model.image_h, cfg.model.image_w)}"
        )
    if scene.labels["seg"].shape != cfg.bev.shape:
        raise ValidationError(f"scene rasters {scene.labels['seg'].shape} do not match BEV {cfg.bev.shape}")
    if params_dir is not None:
        params = load_params(params_dir)
    else:
        params = fusion.init_params(cfg.model, cfg.bins.num_bins, seed)
    artifacts, loss_report = run_forward(scene, cam, params, cfg)
    pred = vectorize_logits(
        artifacts["seg_logits"], artifacts["embeddings"], artifacts["dir_logits"], cfg.vectorize, cfg.bev
    )
    out = Path(out_dir)
    tensors = out / "tensors"
    tensors.mkdir(parents=True, exist_ok=True)
    for name, arr in artifacts.items():
        save_btf(tensors / f"{name}.btf", arr)
    if params_dir is None:
        save_params(out / "params", params)
    atomic_write_text(out / "pred_map.json", pred.to_json())
    atomic_write_text(out / "losses.json", _json(loss_report))
    atomic_write_text(out / "config.json", cfg.to_json())
    if check_grads:
        cmd_check_grads(out, seed)
    return loss_report


# ---------------------------------------------------------------- check-grads


def cmd_check_grads(out_dir, seed: int = 0) -> list:
    results = run_grad_suite(seed=seed)
    rows = [
        {"op": r.op, "instance": r.instance, "wrt": r.wrt, "max_abs_err": float(f"{r.max_abs_err:.3e}"), "passed": r.passed}
        for r in results
    ]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(out_dir) / "grad_check.json", _json(rows))
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_abs_err)
        raise NumericError(
            f"{len(failed)} gradient checks failed; worst {worst.op}[{worst.instance}] "
            f"d/d{worst.wrt} error {worst.max_abs_err:.3e}"
        )
    return results


# ---------------------------------------------------------------- eval


def load_map(path) -> PolylineMap:
    return PolylineMap.from_json(_read(path).decode("utf-8"), source=str(path))


def check_extent(pmap: PolylineMap, bev: BevConfig, source: str) -> None:
    tol = bev.resolution
    for inst in pmap.instances:
        p = inst.points
        if (
            p[:, 0].min() < bev.x_min - tol or p[:, 0].max() > bev.x_max + tol
            or p[:, 1].min() < bev.y_min - tol or p[:, 1].max() > bev.y_max + tol
        ):
            raise ValidationError(f"{source}: {inst.cls} instance lies outside the BEV extent")


def cmd_eval(cfg: RunConfig, pred_path, gt_path, out_dir):
    pred = load_map(pred_path)
    gt = load_map(gt_path)
    check_extent(pred, cfg.bev, str(pred_path))
    check_extent(gt, cfg.bev, str(gt_path))
    report = eval_intervals(pred, gt, cfg.bev, cfg.thresholds, cfg.eval)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "eval.csv", report.to_csv())
    atomic_write_text(out / "eval.json", report.to_json())
    return report


# ---------------------------------------------------------------- plan


def _parse_scenes(path):
    try:
        entries = json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise BevIOError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise UsageError(f"{path}: scenes file must be a non-empty JSON list")
    base = Path(path).parent
    scenes = []
    for k, e in enumerate(entries):
        try:
            pmap = load_map(base / e["map_file"])
            start = RobotState(float(e["start"]["x"]), float(e["start"]["y"]), float(e["start"].get("heading", 0.0)))
            goal = (float(e["goal"][0]), float(e["goal"][1]))
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise ValidationError(f"{path}: scene {k} is malformed: {exc}") from exc
        scenes.append(PlanScene(pmap, start, goal))
    return scenes


def cmd_plan(cfg: RunConfig, scenes_path, out_dir, max_steps: int = 300):
    scenes = _parse_scenes(scenes_path)
    rate, results = success_rate(scenes, cfg.bev, cfg.planner, max_steps)
    out = Path(out_dir)
    (out / "paths").mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scene", "verdict", "steps", "path_file"])
    for i, r in enumerate(results):
        inst = r.to_instance()
        path_file = ""
        if inst is not None:
            path_file = f"paths/scene_{i:03d}.json"
            atomic_write_text(out / path_file, PolylineMap([inst]).to_json())
        writer.writerow([i, r.verdict, r.steps, path_file])
        log.info("scene %d: %s after %d steps", i, r.verdict, r.steps)
    atomic_write_text(out / "verdicts.csv", buf.getvalue())
    counts = {v: sum(r.verdict == v for r in results) for v in ("success", "sidewalk_hit", "stuck", "timeout")}
    atomic_write_text(out / "summary.json", _json({"scenes": len(results), "success_rate": rate, "verdicts": counts}))
    return rate, results


# ---------------------------------------------------------------- render


def cmd_render(cfg: RunConfig, input_path, out_path, radius: int = 0) -> Path:
    src = Path(input_path)
    out = Path(out_path)
    if src.suffix == ".json":
        write_map_ppm(out, load_map(src), cfg.bev, radius)
    else:
        arr = load_btf(src)
        if arr.ndim not in (2, 3):
            raise ValidationError(f"{src}: can only render 2-D or 3-D tensors, got {arr.ndim}-D")
        write_pgm(out, arr)
    return out
