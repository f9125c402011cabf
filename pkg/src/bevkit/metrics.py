"""Map evaluation: raster IoU, Chamfer distances, dual-threshold AP, range intervals."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import BevConfig, EvalConfig, MatchThresholds
from .errors import ShapeError, ValidationError
from .maps import CLASS_IDS, CLASS_NAMES, MapInstance, PolylineMap, clip_polyline, rasterize_classes, rasterize_polyline, resample

_CHUNK = 2048


def raster_iou(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"raster extents differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def _nearest_distances(src, dst) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    out = np.empty(len(src))
    for s in range(0, len(src), _CHUNK):
        block = src[s : s + _CHUNK]
        dx = block[:, None, 0] - dst[None, :, 0]
        dy = block[:, None, 1] - dst[None, :, 1]
        out[s : s + _CHUNK] = np.sqrt(dx * dx + dy * dy).min(axis=1)
    return out


def chamfer_pred(pred_pts, gt_pts):
    """Mean distance from each predicted point to its nearest ground-truth point.

    Returns None when either side is empty.
    """
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return None
    d = _nearest_distances(pred_pts, gt_pts)
    return math.fsum(d.tolist()) / len(d)


def chamfer_sym(pred_pts, gt_pts, cap: float = 5.0):
    """Bidirectional Chamfer distance; each direction is clamped at ``cap`` metres."""
    a = chamfer_pred(pred_pts, gt_pts)
    b = chamfer_pred(gt_pts, pred_pts)
    if a is None or b is None:
        return None
    return min(a, cap) + min(b, cap)


@dataclass
class Match:
    pred_index: int
    gt_index: int | None
    confidence: float
    cd: float | None
    iou: float

    @property
    def tp(self) -> bool:
        return self.gt_index is not None


def match_instances(preds, gts, t: MatchThresholds, bev: BevConfig, sample_step=0.15, match_radius=1):
    """Greedy confidence-ordered matching under the CD-and-IoU true-positive rule.

    A prediction takes the unmatched ground truth with the lowest CD among
    those with CD < cd_max and raster IoU > iou_min.  Returns one Match per
    prediction, in matching order.
    """
    pred_samples = [resample(p.points, sample_step) for p in preds]
    gt_samples = [resample(g.points, sample_step) for g in gts]
    pred_masks = [rasterize_polyline(p.points, bev, match_radius) for p in preds]
    gt_masks = [rasterize_polyline(g.points, bev, match_radius) for g in gts]
    taken = [False] * len(gts)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    matches = []
    for i in order:
        best = None
        for j in range(len(gts)):
            if taken[j]:
                continue
            cd = chamfer_pred(pred_samples[i], gt_samples[j])
            iou = raster_iou(pred_masks[i], gt_masks[j])
            if cd is None or cd >= t.cd_max or iou <= t.iou_min:
                continue
            if best is None or cd < best[1]:
                best = (j, cd, iou)
        if best is None:
            matches.append(Match(i, None, preds[i].confidence, None, 0.0))
        else:
            taken[best[0]] = True
            matches.append(Match(i, best[0], preds[i].confidence, best[1], best[2]))
    return matches


def average_precision(scored, num_gt: int):
    """Ten-point AP from (confidence, is_tp) pairs.

    AP_r is the best precision reached at any recall >= r (0 if r is never
    reached), averaged over r = 0.1 ... 1.0.  Returns None when num_gt == 0.
    """
    if num_gt <= 0:
        return None
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    tp = 0
    curve = []
    for rank, i in enumerate(order, start=1):
        tp += bool(scored[i][1])
        curve.append((tp / num_gt, tp / rank))
    total = 0.0
    for k in range(1, 11):
        r = k / 10
        precisions = [p for rec, p in curve if rec >= r - 1e-12]
        total += max(precisions) if precisions else 0.0
    return total / 10


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    matches: dict = field(default_factory=dict)

    def row(self, cls: str, interval: str) -> dict:
        for r in self.rows:
            if r["class"] == cls and r["interval"] == interval:
                return r
        raise KeyError((cls, interval))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "interval", "iou", "cd_pred", "cd_sym", "ap"])
        for r in self.rows:
            writer.writerow([r["class"], r["interval"]] + [_num(r[k]) for k in ("iou", "cd_pred", "cd_sym", "ap")])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "rows": self.rows,
            "matches": {
                key: [
                    {"pred": m.pred_index, "gt": m.gt_index, "confidence": round(m.confidence, 6),
                     "cd": None if m.cd is None else round(m.cd, 6), "iou": round(m.iou, 6)}
                    for m in ms
                ]
                for key, ms in self.matches.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _num(v):
    return "" if v is None else f"{v:.6f}"


def _clip_instances(instances, lo, hi):
    out = []
    for inst in instances:
        for piece in clip_polyline(inst.points, x0=lo, x1=hi):
            out.append(MapInstance(inst.cls, piece, inst.confidence))
    return out


def _round(v):
    return None if v is None else round(float(v), 6)


def eval_intervals(
    pred: PolylineMap,
    gt: PolylineMap,
    bev: BevConfig,
    t: MatchThresholds = MatchThresholds(),
    cfg: EvalConfig = EvalConfig(),
    pred_raster=None,
    gt_raster=None,
) -> EvalReport:
    """Per-class metrics on every forward interval plus the full range (``all``).

    Semantic rasters default to rasterizing the maps; pass class-id rasters
    to evaluate segmentation output directly.
    """
    if pred_raster is None:
        pred_raster = rasterize_classes(pred, bev, cfg.line_radius)
    if gt_raster is None:
        gt_raster = rasterize_classes(gt, bev, cfg.line_radius)
    pred_raster = np.asarray(pred_raster)
    gt_raster = np.asarray(gt_raster)
    if pred_raster.shape != bev.shape or gt_raster.shape != bev.shape:
        raise ShapeError("rasters do not match the BEV grid")
    lo_all, hi_all = cfg.intervals.breaks[0], cfg.intervals.breaks[-1]
    if lo_all > bev.x_min + 1e-9 or hi_all < bev.x_max - 1e-9:
        raise ValidationError("interval breaks must cover the BEV forward range")
    centers_x = bev.x_min + (np.arange(bev.nx) + 0.5) * bev.resolution
    spans = [(f"{lo:g}-{hi:g}", lo, hi) for lo, hi in cfg.intervals.intervals] + [("all", lo_all, hi_all)]
    report = EvalReport()
    for label, lo, hi in spans:
        cols = (centers_x >= lo) & (centers_x < hi)
        for name in CLASS_NAMES:
            k = CLASS_IDS[name]
            pm = (pred_raster == k) & cols[None, :]
            gm = (gt_raster == k) & cols[None, :]
            p_inst = _clip_instances(pred.of_class(name), lo, hi)
            g_inst = _clip_instances(gt.of_class(name), lo, hi)
            p_pts = _samples(p_inst, cfg.sample_step)
            g_pts = _samples(g_inst, cfg.sample_step)
            matches = match_instances(p_inst, g_inst, t, bev, cfg.sample_step, cfg.match_radius)
            ap = average_precision([(m.confidence, m.tp) for m in matches], len(g_inst))
            report.rows.append({
                "class": name,
                "interval": label,
                "iou": _round(raster_iou(pm, gm)),
                "cd_pred": _round(chamfer_pred(p_pts, g_pts)),
                "cd_sym": _round(chamfer_sym(p_pts, g_pts, cfg.cd_cap)),
                "ap": _round(ap),
                "num_pred": len(p_inst),
                "num_gt": len(g_inst),
                "intersection": int(np.logical_and(pm, gm).sum()),
                "union": int(np.logical_or(pm, gm).sum()),
            })
            report.matches[f"{name}/{label}"] = matches
    return report


def _samples(instances, step):
    if not instances:
        return np.zeros((0, 2))
    return np.concatenate([resample(i.points, step) for i in instances])
