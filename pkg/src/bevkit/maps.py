"""Vector HD maps and the polyline geometry shared by every consumer.

Class ids used in semantic rasters: 0 background, 1 divider, 2 crossing,
3 boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import BevConfig
from .errors import BevIOError, ValidationError

CLASS_NAMES = ("divider", "crossing", "boundary")
CLASS_IDS = {name: i + 1 for i, name in enumerate(CLASS_NAMES)}
NUM_DIRECTIONS = 36
NO_DIRECTION = -1
_ALLOWED = set(CLASS_NAMES) | {"path"}


@dataclass
class MapInstance:
    cls: str
    points: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        if self.cls not in _ALLOWED:
            raise ValidationError(f"unknown map class {self.cls!r}")
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = dedupe(pts)
        if len(self.points) < 2:
            raise ValidationError("a map instance needs at least two distinct points")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence must lie in [0, 1]")


@dataclass
class PolylineMap:
    instances: list[MapInstance] = field(default_factory=list)

    def of_class(self, cls: str) -> list[MapInstance]:
        return [inst for inst in self.instances if inst.cls == cls]

    def to_json(self) -> str:
        parts = []
        for inst in self.instances:
            pts = ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in inst.points)
            parts.append(
                f'{{"class":"{inst.cls}","confidence":{_fmt(inst.confidence)},"points":[{pts}]}}'
            )
        return '{"instances":[' + ",".join(parts) + "]}\n"

    @classmethod
    def from_json(cls, text: str, source="<map>") -> "PolylineMap":
        try:
            data = json.loads(text)
            raw = data["instances"]
            instances = [
                MapInstance(item["class"], np.asarray(item["points"], dtype=np.float64),
                            float(item.get("confidence", 1.0)))
                for item in raw
            ]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise BevIOError(f"{source}: malformed polyline map ({exc})") from exc
        return cls(instances)


def _fmt(v: float) -> str:
    r = round(float(v), 3)
    if r == 0:
        r = 0.0
    return f"{r:.3f}"


def dedupe(points: np.ndarray) -> np.ndarray:
    """Drop consecutive repeated points."""
    if len(points) < 2:
        return points
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(np.diff(points, axis=0) != 0, axis=1)
    return points[keep]


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.hypot(*np.diff(pts, axis=0).T).sum()) if len(pts) > 1 else 0.0


def resample(points, step: float) -> np.ndarray:
    """Points every ``step`` metres of arc length, always keeping both ends."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return pts.copy()
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.arange(0.0, total, step)
    if total - s[-1] > 1e-9:
        s = np.append(s, total)
    x = np.interp(s, cum, pts[:, 0])
    y = np.interp(s, cum, pts[:, 1])
    return np.stack([x, y], axis=1)


def _clip_segment(p, q, box):
    """Liang-Barsky clip of segment p->q; returns (t0, t1) or None."""
    x0, x1, y0, y1 = box
    dx, dy = q[0] - p[0], q[1] - p[1]
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-dx, p[0] - x0), (dx, x1 - p[0]), (-dy, p[1] - y0), (dy, y1 - p[1])):
        if pk == 0:
            if qk < 0:
                return None
            continue
        t = qk / pk
        if pk < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 > t1:
            return None
    return t0, t1


def clip_polyline(points, x0=-math.inf, x1=math.inf, y0=-math.inf, y1=math.inf) -> list[np.ndarray]:
    """Clip a polyline to an axis-aligned box, splitting it into inside runs."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    box = (x0, x1, y0, y1)
    pieces: list[list] = []
    current: list = []
    for p, q in zip(pts[:-1], pts[1:]):
        span = _clip_segment(p, q, box)
        if span is None:
            if current:
                pieces.append(current)
                current = []
            continue
        t0, t1 = span
        a = p + t0 * (q - p)
        b = p + t1 * (q - p)
        if current and t0 == 0.0:
            current.append(b)
        else:
            if current:
                pieces.append(current)
            current = [a, b]
        if t1 < 1.0:
            pieces.append(current)
            current = []
    if current:
        pieces.append(current)
    out = []
    for piece in pieces:
        arr = dedupe(np.asarray(piece))
        if len(arr) >= 2:
            out.append(arr)
    return out


def direction_class(angle_rad):
    """Quantize an orientation into one of 36 classes of 10 degrees, 0 = forward."""
    deg = np.degrees(angle_rad) % 360.0
    return (np.floor(deg / 10.0).astype(np.int64)) % NUM_DIRECTIONS


def direction_center(cls):
    return np.radians(np.asarray(cls, dtype=np.float64) * 10.0 + 5.0)


def _segment_cells(points, bev: BevConfig):
    """Yield (rows, cols, angle) for every segment, sampled at quarter cells."""
    pts = np.asarray(points, dtype=np.float64)
    for p, q in zip(pts[:-1], pts[1:]):
        length = math.hypot(q[0] - p[0], q[1] - p[1])
        n = max(2, int(math.ceil(length / (bev.resolution * 0.25))) + 1)
        t = np.linspace(0.0, 1.0, n)
        xs = p[0] + t * (q[0] - p[0])
        ys = p[1] + t * (q[1] - p[1])
        r, c = bev.cell_of(xs, ys)
        r = np.floor(r).astype(np.int64)
        c = np.floor(c).astype(np.int64)
        ok = (r >= 0) & (r < bev.ny) & (c >= 0) & (c < bev.nx)
        yield r[ok], c[ok], math.atan2(q[1] - p[1], q[0] - p[0])


def dilate(mask, radius: int):
    if radius <= 0:
        return mask
    return ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))


def rasterize_polyline(points, bev: BevConfig, radius: int = 0) -> np.ndarray:
    mask = np.zeros(bev.shape, dtype=bool)
    for r, c, _ in _segment_cells(points, bev):
        mask[r, c] = True
    return dilate(mask, radius)


def rasterize_with_direction(points, bev: BevConfig, mask, directions) -> None:
    """Mark a polyline into ``mask`` in place and record per-cell direction classes."""
    for r, c, angle in _segment_cells(points, bev):
        mask[r, c] = True
        directions[r, c] = direction_class(angle)


def rasterize_classes(pmap: PolylineMap, bev: BevConfig, radius: int = 0) -> np.ndarray:
    """Semantic raster of class ids; boundaries overwrite dividers overwrite crossings."""
    raster = np.zeros(bev.shape, dtype=np.int64)
    for name in ("crossing", "divider", "boundary"):
        for inst in pmap.of_class(name):
            raster[rasterize_polyline(inst.points, bev, radius)] = CLASS_IDS[name]
    return raster
