"""Turn per-cell head outputs into vector polylines.

Per class: threshold the segmentation, cluster foreground embeddings with
DBSCAN, walk each cluster greedily along its predicted directions, then drop
redundant instances with mask-IoU NMS.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .config import BevConfig, VectorizeConfig
from .errors import ParameterError
from .maps import CLASS_IDS, CLASS_NAMES, MapInstance, PolylineMap, direction_center, rasterize_polyline
from .tensor import softmax_lastdim

NOISE = -1


@dataclass
class ClusterResult:
    labels: np.ndarray  # cluster id per point, 1..cluster_count, NOISE for noise
    cluster_count: int


def dbscan(points, eps: float, min_pts: int) -> ClusterResult:
    """Density clustering; clusters are numbered in order of their first core point."""
    if eps <= 0 or min_pts < 1:
        raise ParameterError("dbscan needs eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterResult(labels, 0)
    pts = pts.reshape(n, -1)
    neighbours = cKDTree(pts).query_ball_point(pts, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        cluster += 1
        visited[i] = True
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in sorted(neighbours[j]):
                if labels[k] == NOISE:
                    labels[k] = cluster
                if not visited[k] and core[k]:
                    visited[k] = True
                    queue.append(k)
    return ClusterResult(labels, cluster)


def mask_iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def nms_instances(masks, confidences, iou_thresh: float = 0.3) -> list[int]:
    """Greedy suppression: keep a candidate iff its IoU with every kept one is <= iou_thresh."""
    order = sorted(range(len(masks)), key=lambda i: (-confidences[i], i))
    kept: list[int] = []
    for i in order:
        if all(mask_iou(masks[i], masks[j]) <= iou_thresh for j in kept):
            kept.append(i)
    return kept


def _orient_axis(coords, dirs):
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered
    vals, vecs = np.linalg.eigh(cov)
    axis = vecs[:, np.argmax(vals)]
    ang = direction_center(dirs)
    mean_dir = np.array([np.cos(ang).sum(), np.sin(ang).sum()])
    ref = mean_dir if np.hypot(*mean_dir) > 1e-9 else np.array([1.0, 1e-3])
    return axis if axis @ ref >= 0 else -axis


def connect_polyline(cells, directions, bev: BevConfig, search_radius=5.0, angle_tol_deg=45.0):
    """Greedy walk through a cluster's cells along their predicted directions.

    ``cells`` is an (N, 2) array of (row, col); ``directions`` holds each
    cell's direction class.  Starting at the cluster's extreme cell along its
    principal axis, step to the nearest unvisited cell within
    ``search_radius`` cells whose bearing is within ``angle_tol_deg`` of the
    current cell's direction, else to the nearest unvisited cell in range.
    Unchosen 8-neighbours of each visited cell are consumed so the walk does
    not double back across a thick stroke.

    Returns an (M, 2) array of metric (x, y) points, or None when the cluster
    has a single cell.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    directions = np.asarray(directions, dtype=np.int64).reshape(-1)
    order = np.lexsort((cells[:, 1], cells[:, 0]))
    cells, directions = cells[order], directions[order]
    if len(cells) < 2:
        return None
    xy = np.stack([cells[:, 1], cells[:, 0]], axis=1).astype(np.float64)
    axis = _orient_axis(xy, directions)
    proj = xy @ axis
    current = int(np.flatnonzero(proj <= proj.min() + 1e-9)[0])
    unvisited = np.ones(len(cells), dtype=bool)
    unvisited[current] = False
    path = [current]
    tol = math.radians(angle_tol_deg)
    while unvisited.any():
        delta = xy - xy[current]
        dist = np.hypot(delta[:, 0], delta[:, 1])
        cand = unvisited & (dist <= search_radius + 1e-9)
        if not cand.any():
            break
        heading = float(direction_center(directions[current]))
        bearing = np.arctan2(delta[:, 1], delta[:, 0])
        dev = np.abs((bearing - heading + math.pi) % (2 * math.pi) - math.pi)
        aligned = cand & (dev < tol)
        pool = aligned if aligned.any() else cand
        idx = np.flatnonzero(pool)
        nxt = int(idx[np.argmin(dist[idx])])
        near = unvisited & (np.abs(delta).max(axis=1) <= 1)
        near[nxt] = False
        unvisited[near] = False
        unvisited[nxt] = False
        path.append(nxt)
        current = nxt
    if len(path) < 2:
        return None
    rc = cells[path]
    x, y = bev.cell_center(rc[:, 0].astype(np.float64), rc[:, 1].astype(np.float64))
    return np.stack([x, y], axis=1)


def vectorize_map(seg_probs, embeddings, dir_logits, cfg: VectorizeConfig, bev: BevConfig) -> PolylineMap:
    """Vector map from head outputs; ``seg_probs`` is (H, W, 4) with channel 0 background."""
    seg_probs = np.asarray(seg_probs, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    dir_cls = np.argmax(np.asarray(dir_logits), axis=-1)
    instances: list[MapInstance] = []
    for name in CLASS_NAMES:
        k = CLASS_IDS[name]
        prob = seg_probs[..., k]
        fg = prob > cfg.seg_threshold
        if not fg.any():
            continue
        rows, cols = np.nonzero(fg)
        result = dbscan(embeddings[rows, cols], cfg.eps, cfg.min_pts)
        candidates = []
        for cid in range(1, result.cluster_count + 1):
            sel = result.labels == cid
            cells = np.stack([rows[sel], cols[sel]], axis=1)
            pts = connect_polyline(cells, dir_cls[rows[sel], cols[sel]], bev, cfg.search_radius, cfg.angle_tol_deg)
            if pts is None:
                continue
            conf = float(prob[rows[sel], cols[sel]].mean())
            candidates.append((pts, conf))
        if not candidates:
            continue
        masks = [rasterize_polyline(p, bev, cfg.nms_radius) for p, _ in candidates]
        kept = nms_instances(masks, [c for _, c in candidates], cfg.nms_iou)
        for i in kept:
            pts, conf = candidates[i]
            instances.append(MapInstance(name, pts, min(1.0, max(0.0, conf))))
    return PolylineMap(instances)


def vectorize_logits(seg_logits, embeddings, dir_logits, cfg: VectorizeConfig, bev: BevConfig) -> PolylineMap:
    return vectorize_map(softmax_lastdim(np.asarray(seg_logits, dtype=np.float64)), embeddings, dir_logits, cfg, bev)
