"""Dynamic-window local planning on costmaps built from vector maps."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.ndimage import distance_transform_edt
from scipy.sparse.csgraph import dijkstra

from .config import BevConfig, DwaConfig
from .errors import CostmapError, ParameterError, StuckError
from .maps import MapInstance, PolylineMap, clip_polyline, polyline_length, rasterize_polyline

UNKNOWN, DRIVABLE, BOUNDARY, SIDEWALK = 0, 1, 2, 3
ROUTE_WALL_PENALTY = 4.0  # metres; edge weight factor is 1 + penalty / (summed clearance)
LOOKAHEAD = 4.0  # metres along the shortest drivable route used to aim the heading term


@dataclass
class CostMap:
    labels: np.ndarray  # (ny, nx) uint8 of UNKNOWN / DRIVABLE / BOUNDARY / SIDEWALK
    bev: BevConfig
    clearance: np.ndarray = field(init=False, repr=False)
    _guides: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.bev.shape:
            raise CostmapError("costmap labels do not match the BEV grid")
        # metric distance from each drivable cell to the nearest non-drivable one
        self.clearance = distance_transform_edt(self.labels == DRIVABLE) * self.bev.resolution

    def cells(self, x, y):
        r, c = self.bev.cell_of(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        return np.floor(r).astype(np.int64), np.floor(c).astype(np.int64)

    def lookup(self, x, y):
        """Labels at metric points; anything outside the grid reads as UNKNOWN."""
        r, c = self.cells(x, y)
        inside = (r >= 0) & (r < self.bev.ny) & (c >= 0) & (c < self.bev.nx)
        out = np.full(np.shape(r), UNKNOWN, dtype=np.uint8)
        out[inside] = self.labels[r[inside], c[inside]]
        return out

    def guide(self, goal):
        """Per-cell aim point toward ``goal`` along the shortest 8-connected drivable route.

        Returns an (ny, nx, 2) array of metric points, NaN where the goal is not
        reachable (or the goal cell itself is not drivable).
        """
        key = (round(float(goal[0]), 9), round(float(goal[1]), 9))
        if key in self._guides:
            return self._guides[key]
        ny, nx = self.bev.shape
        out = np.full((ny, nx, 2), np.nan)
        gr, gc = self.cells(key[0], key[1])
        gr, gc = int(gr), int(gc)
        if 0 <= gr < ny and 0 <= gc < nx and self.labels[gr, gc] == DRIVABLE:
            free = (self.labels == DRIVABLE).ravel()
            clear = self.clearance.ravel()
            ids = np.arange(ny * nx).reshape(ny, nx)
            rows, cols, wts = [], [], []
            for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
                a = ids[max(0, -dr) : ny - max(0, dr), max(0, -dc) : nx - max(0, dc)].ravel()
                b = ids[max(0, dr) : ny - max(0, -dr), max(0, dc) : nx - max(0, -dc)].ravel()
                ok = free[a] & free[b]
                rows.append(a[ok])
                cols.append(b[ok])
                # routes that hug walls cost more, which keeps the aim near the lane centre
                pen = 1.0 + ROUTE_WALL_PENALTY / np.maximum(clear[a[ok]] + clear[b[ok]], 1e-6)
                wts.append(math.hypot(dr, dc) * pen)
            graph = sparse.csr_matrix(
                (np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(ny * nx, ny * nx)
            )
            dist, pred = dijkstra(graph, directed=False, indices=gr * nx + gc, return_predecessors=True)
            goal_id = gr * nx + gc
            step = np.where(pred < 0, np.arange(ny * nx), pred)
            step[goal_id] = goal_id
            aim = np.arange(ny * nx)
            for _ in range(max(1, int(math.ceil(LOOKAHEAD / self.bev.resolution)))):
                aim = step[aim]
            ar, ac = np.divmod(aim, nx)
            ax, ay = self.bev.cell_center(ar.astype(np.float64), ac.astype(np.float64))
            reach = np.isfinite(dist)
            pts = np.stack([ax, ay], axis=1)
            pts[aim == goal_id] = key
            pts[~reach] = np.nan
            out = pts.reshape(ny, nx, 2)
        self._guides[key] = out
        return out

    def clearance_at(self, x, y):
        r, c = self.cells(x, y)
        inside = (r >= 0) & (r < self.bev.ny) & (c >= 0) & (c < self.bev.nx)
        out = np.zeros(np.shape(r))
        out[inside] = self.clearance[r[inside], c[inside]]
        return out


def _inside_polygon(px, py, poly):
    """Even-odd rule for many points against one closed polygon."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        if b == d:
            continue
        crosses = (b > py) != (d > py)
        xint = a + (py - b) * (c - a) / (d - b)
        inside ^= crosses & (px < xint)
    return inside


def build_costmap(pmap: PolylineMap, bev: BevConfig) -> CostMap:
    """Rasterize a map into drivable / boundary / sidewalk / unknown cells.

    Drivable space is the region enclosed by the two longest boundary
    polylines (each oriented to start at its end nearer the origin, then
    joined end to end).  Cells inside the forward span covered by the
    boundaries but not drivable are sidewalk; cells beyond it are unknown.
    Boundary cells are dilated by one cell.
    """
    bounds = pmap.of_class("boundary")
    if not bounds:
        raise CostmapError("costmap needs at least one boundary instance")
    ys, xs = np.mgrid[0 : bev.ny, 0 : bev.nx].astype(np.float64)
    cx, cy = bev.cell_center(ys, xs)
    labels = np.full(bev.shape, UNKNOWN, dtype=np.uint8)
    all_x = np.concatenate([b.points[:, 0] for b in bounds])
    covered = (cx >= all_x.min() - bev.resolution / 2) & (cx <= all_x.max() + bev.resolution / 2)
    labels[covered] = SIDEWALK
    longest = sorted(bounds, key=lambda b: -polyline_length(b.points))[:2]
    if len(longest) == 2:
        a, b = (p.points if np.hypot(*p.points[0]) <= np.hypot(*p.points[-1]) else p.points[::-1] for p in longest)
        poly = np.concatenate([a, b[::-1]])
        labels[_inside_polygon(cx, cy, poly)] = DRIVABLE
    for inst in bounds:
        labels[rasterize_polyline(inst.points, bev, radius=1)] = BOUNDARY
    return CostMap(labels, bev)


def truncate_map(pmap: PolylineMap, x_max: float, min_len: float = 0.0) -> PolylineMap:
    """Keep only the parts of a map with x <= x_max (a short-range perception stand-in)."""
    out = []
    for inst in pmap.instances:
        for piece in clip_polyline(inst.points, x1=x_max):
            if len(piece) >= 2 and polyline_length(piece) > min_len:
                out.append(MapInstance(inst.cls, piece, inst.confidence))
    return PolylineMap(out)


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    heading: float
    v: float = 0.0
    omega: float = 0.0


def _rollout(x, y, th, v, w, t):
    """Unicycle pose after time t for arrays of (v, w); exact arcs."""
    small = np.abs(w) < 1e-9
    safe_w = np.where(small, 1.0, w)
    nth = th + w * t
    ax = np.where(small, x + v * t * np.cos(th), x + v / safe_w * (np.sin(nth) - np.sin(th)))
    ay = np.where(small, y + v * t * np.sin(th), y - v / safe_w * (np.cos(nth) - np.cos(th)))
    return ax, ay, nth


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _substeps(cfg: DwaConfig, bev: BevConfig) -> int:
    # sample each dt finely enough that no cell is skipped
    return max(1, int(math.ceil(cfg.v_max * cfg.dt / (bev.resolution / 2))))


def dynamic_window(state: RobotState, cfg: DwaConfig):
    v_lo = max(0.0, state.v - cfg.accel_v * cfg.dt)
    v_hi = min(cfg.v_max, state.v + cfg.accel_v * cfg.dt)
    w_lo = max(-cfg.omega_max, state.omega - cfg.accel_omega * cfg.dt)
    w_hi = min(cfg.omega_max, state.omega + cfg.accel_omega * cfg.dt)
    return np.linspace(v_lo, v_hi, cfg.v_samples), np.linspace(w_lo, w_hi, cfg.omega_samples)


@dataclass
class ArcScores:
    v: np.ndarray
    omega: np.ndarray
    feasible: np.ndarray
    cost: np.ndarray


def score_arcs(state: RobotState, goal, cm: CostMap, cfg: DwaConfig, vs, ws) -> ArcScores:
    """Roll out every (v, w) pair in ``vs`` x ``ws`` and score the arcs."""
    vv, ww = np.meshgrid(vs, ws, indexing="ij")
    v, w = vv.ravel(), ww.ravel()
    steps = int(round(cfg.horizon / cfg.dt))
    sub = _substeps(cfg, cm.bev)
    times = cfg.dt * np.arange(1, steps * sub + 1) / sub
    px, py, pth = _rollout(state.x, state.y, state.heading, v[:, None], w[:, None], times[None, :])
    gx, gy = float(goal[0]), float(goal[1])
    dist_goal = np.hypot(px - gx, py - gy)
    reached = dist_goal <= cfg.goal_tolerance
    # an arc stops counting once it enters the goal region
    first = np.where(reached.any(axis=1), reached.argmax(axis=1), times.size - 1)
    active = np.arange(times.size)[None, :] <= first[:, None]
    labels = cm.lookup(px, py)
    feasible = np.all((labels == DRIVABLE) | ~active, axis=1)
    clear = np.where(active, cm.clearance_at(px, py), np.inf).min(axis=1)
    rows = np.arange(v.size)
    ex, ey, eth = px[rows, first], py[rows, first], pth[rows, first]
    # aim along the drivable route when one exists, else straight at the goal
    guide = cm.guide(goal)
    er, ec = cm.cells(ex, ey)
    inside = (er >= 0) & (er < cm.bev.ny) & (ec >= 0) & (ec < cm.bev.nx)
    aim = np.full((v.size, 2), np.nan)
    aim[inside] = guide[er[inside], ec[inside]]
    routed = ~np.isnan(aim[:, 0])
    tx = np.where(routed, aim[:, 0], gx)
    ty = np.where(routed, aim[:, 1], gy)
    bearing = np.arctan2(ty - ey, tx - ex)
    heading_cost = np.where(reached[rows, first], 0.0, np.abs(_wrap(bearing - eth)) / np.pi)
    # speed is scored relative to the current window so crawling never ties with moving
    span = float(np.max(vs) - np.min(vs))
    vel_cost = 1.0 - (v - np.min(vs)) / span if span > 0 else 1.0 - v / cfg.v_max
    cost = (
        cfg.w_heading * heading_cost
        + cfg.w_clearance / (1.0 + clear)
        + cfg.w_velocity * vel_cost
    )
    return ArcScores(v, w, feasible, cost)


def dwa_step(state: RobotState, goal, cm: CostMap, cfg: DwaConfig = DwaConfig()):
    """Best (v, omega) inside the dynamic window.

    Raises StuckError when every sampled arc leaves drivable space.
    """
    vs, ws = dynamic_window(state, cfg)
    s = score_arcs(state, goal, cm, cfg, vs, ws)
    if not s.feasible.any():
        raise StuckError("no admissible arc stays in drivable space")
    idx = np.flatnonzero(s.feasible)
    key = np.round(s.cost[idx], 9)
    order = np.lexsort((idx, np.abs(s.omega[idx]), key))
    best = idx[order[0]]
    return float(s.v[best]), float(s.omega[best])


@dataclass
class PlanResult:
    verdict: str  # success | sidewalk_hit | stuck | timeout
    path: np.ndarray  # (N, 2) visited positions
    steps: int

    def to_instance(self) -> MapInstance | None:
        if len(self.path) < 2 or np.allclose(self.path, self.path[0]):
            return None
        return MapInstance("path", self.path)


def plan_path(start: RobotState, goal, cm: CostMap, cfg: DwaConfig = DwaConfig(), max_steps: int = 300) -> PlanResult:
    """Run DWA until the goal is reached or planning fails."""
    gx, gy = float(goal[0]), float(goal[1])
    state = start
    path = [(state.x, state.y)]
    sub = _substeps(cfg, cm.bev)
    stalled = 0
    for step in range(1, max_steps + 1):
        if math.hypot(state.x - gx, state.y - gy) <= cfg.goal_tolerance:
            return PlanResult("success", np.array(path), step - 1)
        try:
            v, w = dwa_step(state, goal, cm, cfg)
        except StuckError:
            return PlanResult("stuck", np.array(path), step - 1)
        t = cfg.dt * np.arange(1, sub + 1) / sub
        px, py, pth = _rollout(state.x, state.y, state.heading, np.full(sub, v), np.full(sub, w), t)
        near = np.flatnonzero(np.hypot(px - gx, py - gy) <= cfg.goal_tolerance)
        end = int(near[0]) + 1 if near.size else sub
        if np.any(cm.lookup(px[:end], py[:end]) != DRIVABLE):
            path.extend(zip(px[:end].tolist(), py[:end].tolist()))
            return PlanResult("sidewalk_hit", np.array(path), step)
        if near.size:
            path.append((float(px[end - 1]), float(py[end - 1])))
            return PlanResult("success", np.array(path), step)
        state = RobotState(float(px[-1]), float(py[-1]), float(_wrap(pth[-1])), v, w)
        path.append((state.x, state.y))
        stalled = stalled + 1 if v == 0.0 else 0
        if stalled >= cfg.stall_steps:
            return PlanResult("stuck", np.array(path), step)
    if math.hypot(state.x - gx, state.y - gy) <= cfg.goal_tolerance:
        return PlanResult("success", np.array(path), max_steps)
    return PlanResult("timeout", np.array(path), max_steps)


@dataclass
class PlanScene:
    pmap: PolylineMap
    start: RobotState
    goal: tuple


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("BEVKIT_THREADS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ParameterError(f"BEVKIT_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ParameterError("BEVKIT_THREADS must be at least 1")
    return n


def success_rate(scenes, bev: BevConfig, cfg: DwaConfig = DwaConfig(), max_steps: int = 300, threads=None):
    """Fraction of scenes planned successfully, plus per-scene results in input order."""
    scenes = list(scenes)
    if not scenes:
        raise ParameterError("success_rate needs at least one scene")

    def run(sc: PlanScene):
        try:
            cm = build_costmap(sc.pmap, bev)
        except CostmapError:
            return PlanResult("stuck", np.array([[sc.start.x, sc.start.y]]), 0)
        return plan_path(sc.start, sc.goal, cm, cfg, max_steps)

    n = threads if threads is not None else thread_count()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(run, scenes))
    else:
        results = [run(sc) for sc in scenes]
    rate = sum(r.verdict == "success" for r in results) / len(results)
    return rate, results


def centerline_goal(centerline, rng, lo: float, hi: float, margin: float, bev: BevConfig):
    """A random road-centre point with lo <= x <= hi kept ``margin`` inside the grid."""
    c = np.asarray(centerline, dtype=np.float64)
    ok = (
        (c[:, 0] >= lo) & (c[:, 0] <= hi)
        & (c[:, 1] >= bev.y_min + margin) & (c[:, 1] <= bev.y_max - margin)
        & (c[:, 0] <= bev.x_max - margin)
    )
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return None
    p = c[idx[int(rng.integers(idx.size))]]
    return float(p[0]), float(p[1])


def paired_suite(n: int, bev: BevConfig, seed: int = 0, goal_range=(60.0, 85.0), truncate_at: float = 30.0):
    """Paired planning scenes on random roads: full-range maps and maps cut at ``truncate_at``.

    Both lists share starts and goals; goals are road-centre points in ``goal_range``.
    """
    from .synth import random_spec, scene_map

    full, short = [], []
    rng = np.random.default_rng(seed)
    k = 0
    while len(full) < n:
        spec = random_spec(seed * 1000 + k)
        k += 1
        gt, center = scene_map(spec, bev)
        goal = centerline_goal(center, rng, goal_range[0], goal_range[1], 3.0, bev)
        if goal is None or len(center) < 2:
            continue
        d = center[min(20, len(center) - 1)] - center[0]
        start = RobotState(float(center[0, 0]) + bev.resolution, float(center[0, 1]), math.atan2(d[1], d[0]))
        full.append(PlanScene(gt, start, goal))
        short.append(PlanScene(truncate_map(gt, truncate_at), start, goal))
    return full, short
