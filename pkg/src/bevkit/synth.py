"""Procedural desk-scale scenes: road maps, LiDAR sweeps, camera views and labels.

A scene is fully determined by its :class:`SceneSpec` (including the seed),
the BEV grid, the camera and the depth binning.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import SENTINEL, CameraModel
from .config import BevConfig, DepthBinning
from .errors import SpecError
from .io import _read, atomic_write_text, load_btf, load_pc3f, save_btf, save_pc3f
from .maps import (
    CLASS_IDS,
    NO_DIRECTION,
    MapInstance,
    PolylineMap,
    clip_polyline,
    polyline_length,
    rasterize_with_direction,
)

LIDAR_HEIGHT = 1.8
MIN_INSTANCE_LENGTH = 3.0
_DS = 0.05


@dataclass(frozen=True)
class RoadSpec:
    kind: str = "straight"  # straight | curve | turn
    radius: float = 200.0  # curve radius, signed: positive bends left
    angle: float = 0.0  # turn angle in degrees, signed: positive turns left
    turn_start: float = 25.0
    turn_radius: float = 10.0
    lateral_offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("straight", "curve", "turn"):
            raise SpecError(f"unknown road kind {self.kind!r}")
        if self.kind == "curve" and abs(self.radius) < 5.0:
            raise SpecError("curve radius must be at least 5 m")
        if self.kind == "turn" and (self.turn_radius <= 0 or self.turn_start < 0):
            raise SpecError("turn needs a positive radius and nonnegative start")


@dataclass(frozen=True)
class LidarSpec:
    max_ground_range: float = 30.0
    beam_count: int = 32

    def __post_init__(self):
        if not 0 < self.max_ground_range <= 90 or self.beam_count < 1:
            raise SpecError("lidar range must lie in (0, 90] with at least one beam")


@dataclass(frozen=True)
class NoiseSpec:
    dropout_prob: float = 0.0
    depth_sigma: float = 0.0

    def __post_init__(self):
        if not 0 <= self.dropout_prob <= 1 or self.depth_sigma < 0:
            raise SpecError("noise needs dropout in [0, 1] and depth_sigma >= 0")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    road: RoadSpec = field(default_factory=RoadSpec)
    lane_count: int = 2
    lane_width: float = 3.5
    crossing_positions: tuple = ()
    lidar: LidarSpec = field(default_factory=LidarSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        object.__setattr__(self, "crossing_positions", tuple(float(c) for c in self.crossing_positions))
        if self.lane_width <= 0 or self.lane_count < 1:
            raise SpecError("lane_width must be positive and lane_count at least 1")
        if self.road.kind == "turn" and self.lane_count * self.lane_width >= 2 * self.road.turn_radius:
            raise SpecError("road is wider than its turn radius allows")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            d = dict(d)
            road = RoadSpec(**d.pop("road", {}))
            lidar = LidarSpec(**d.pop("lidar", {}))
            noise = NoiseSpec(**d.pop("noise", {}))
            return cls(road=road, lidar=lidar, noise=noise, **d)
        except TypeError as exc:
            raise SpecError(f"bad scene spec: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crossing_positions"] = list(self.crossing_positions)
        return d


def random_spec(seed: int) -> SceneSpec:
    """A plausible scene: straight, gently curved or turning road with 1-3 lanes."""
    rng = np.random.default_rng(seed)
    kind = ["straight", "curve", "turn"][int(rng.integers(3))]
    lane_count = int(rng.integers(2, 4))
    road = RoadSpec(kind=kind)
    if kind == "curve":
        road = RoadSpec(kind="curve", radius=float(rng.choice([-1, 1]) * rng.uniform(150, 400)))
    elif kind == "turn":
        road = RoadSpec(
            kind="turn",
            angle=float(rng.choice([-1, 1]) * rng.uniform(20, 60)),
            turn_start=float(rng.uniform(20, 40)),
            turn_radius=float(rng.uniform(30, 50)),
        )
    crossings = tuple(sorted(float(rng.uniform(8, 80)) for _ in range(int(rng.integers(0, 3)))))
    return SceneSpec(seed=seed, road=road, lane_count=lane_count, lane_width=3.5, crossing_positions=crossings)


# ---------------------------------------------------------------- road geometry


def _heading(s, road: RoadSpec):
    if road.kind == "straight":
        return np.zeros_like(s)
    if road.kind == "curve":
        return s / road.radius
    arc_len = road.turn_radius * math.radians(abs(road.angle))
    sign = math.copysign(1.0, road.angle) if road.angle else 0.0
    into = np.clip(s - road.turn_start, 0.0, arc_len)
    return sign * into / road.turn_radius


def centerline(road: RoadSpec, length: float = 200.0):
    """Dense (s, x, y, heading) samples of the road centre starting at the origin column."""
    s = np.arange(0.0, length + _DS / 2, _DS)
    th = _heading(s, road)
    # trapezoidal integration of the unit tangent
    cx = np.concatenate([[0.0], np.cumsum(0.5 * (np.cos(th[1:]) + np.cos(th[:-1])) * _DS)])
    cy = np.concatenate([[0.0], np.cumsum(0.5 * (np.sin(th[1:]) + np.sin(th[:-1])) * _DS)])
    return s, cx, cy + road.lateral_offset, th


def _offset(cx, cy, th, offset):
    return cx - offset * np.sin(th), cy + offset * np.cos(th)


@dataclass
class Scene:
    spec: SceneSpec
    gt_map: PolylineMap
    cloud: np.ndarray
    labels: dict  # seg, instance, direction (BEV) and depth (image)
    image: np.ndarray  # (H, W, 3) rendered camera view
    centerline: np.ndarray  # (N, 2) metric road centre inside the BEV


def _build_map(spec: SceneSpec, bev: BevConfig):
    s, cx, cy, th = centerline(spec.road)
    keep = np.arange(0, len(s), int(round(0.5 / _DS)))
    half = spec.lane_count * spec.lane_width / 2
    box = dict(x0=bev.x_min, x1=bev.x_max, y0=bev.y_min, y1=bev.y_max)
    instances = []

    def add(cls, xs, ys, min_len=MIN_INSTANCE_LENGTH):
        for piece in clip_polyline(np.stack([xs, ys], axis=1), **box):
            if polyline_length(piece) >= min_len:
                instances.append(MapInstance(cls, piece))

    for off in (half, -half):
        x, y = _offset(cx[keep], cy[keep], th[keep], off)
        add("boundary", x, y)
    for i in range(1, spec.lane_count):
        x, y = _offset(cx[keep], cy[keep], th[keep], -half + i * spec.lane_width)
        add("divider", x, y)
    for pos in spec.crossing_positions:
        j = int(np.argmin(np.abs(s - pos)))
        offs = np.linspace(-half, half, int(math.ceil(2 * half / 0.5)) + 1)
        x, y = _offset(np.full_like(offs, cx[j]), np.full_like(offs, cy[j]), np.full_like(offs, th[j]), offs)
        add("crossing", x, y, min_len=2.0)
    inside = (cx >= bev.x_min) & (cx < bev.x_max) & (cy >= bev.y_min) & (cy < bev.y_max)
    center = np.stack([cx[inside], cy[inside]], axis=1)
    return PolylineMap(instances), center, (cx, cy, half)


def scene_map(spec: SceneSpec, bev: BevConfig):
    """Ground-truth map and in-grid road centre samples for a spec."""
    pmap, center, _ = _build_map(spec, bev)
    return pmap, center


def label_rasters(gt_map: PolylineMap, bev: BevConfig):
    """Semantic, instance and direction rasters; instance ids follow map order."""
    seg = np.zeros(bev.shape, dtype=np.int64)
    inst = np.zeros(bev.shape, dtype=np.int64)
    dirs = np.full(bev.shape, NO_DIRECTION, dtype=np.int64)
    ids = {id(i): n + 1 for n, i in enumerate(gt_map.instances)}
    for name in ("crossing", "divider", "boundary"):
        for instance in gt_map.of_class(name):
            mask = np.zeros(bev.shape, dtype=bool)
            rasterize_with_direction(instance.points, bev, mask, dirs)
            seg[mask] = CLASS_IDS[name]
            inst[mask] = ids[id(instance)]
    return seg, inst, dirs


def simulate_lidar(spec: SceneSpec, rng) -> np.ndarray:
    """Ground returns of a forward-facing rotating LiDAR, limited to max_ground_range."""
    elev = np.radians(np.linspace(-25.0, -0.5, spec.lidar.beam_count))
    az = np.radians(np.arange(-60.0, 60.0 + 1e-9, 0.5))
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    ground = LIDAR_HEIGHT / np.tan(-ee)
    rng_dist = ground / np.cos(ee)
    ok = ground <= spec.lidar.max_ground_range
    rng_dist, ee, aa = rng_dist[ok], ee[ok], aa[ok]
    if spec.noise.depth_sigma > 0:
        # Gaussian in inverse depth; depth_sigma is the std at a 10 m reference range
        inv = 1.0 / rng_dist + rng.standard_normal(rng_dist.shape) * spec.noise.depth_sigma / 100.0
        rng_dist = 1.0 / np.maximum(inv, 1e-3)
    keep = rng.random(rng_dist.shape) >= spec.noise.dropout_prob
    rng_dist, ee, aa = rng_dist[keep], ee[keep], aa[keep]
    x = rng_dist * np.cos(ee) * np.cos(aa)
    y = rng_dist * np.cos(ee) * np.sin(aa)
    z = rng_dist * np.sin(ee)
    return np.stack([x, y, z], axis=1).astype(np.float32)


def render_camera(cam: CameraModel, bins: DepthBinning, bev: BevConfig, seg, road_geom):
    """Ground-plane ray cast: depth image (valid below d_max) and a 3-channel view."""
    cx, cy, half = road_geom
    v, u = np.mgrid[0 : cam.image_h, 0 : cam.image_w].astype(np.float64)
    rays_c = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    rays_l = rays_c @ cam.rotation  # R^T applied to row vectors
    origin = cam.center_in_lidar
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (-LIDAR_HEIGHT - origin[2]) / rays_l[..., 2]
    hit = np.isfinite(lam) & (lam > 0)
    lam = np.where(hit, lam, 0.0)
    gx = origin[0] + lam * rays_l[..., 0]
    gy = origin[1] + lam * rays_l[..., 1]
    depth = np.where(hit & (lam < bins.d_max), lam, SENTINEL).astype(np.float32)

    image = np.zeros((cam.image_h, cam.image_w, 3), dtype=np.float32)
    image[...] = (0.55, 0.7, 0.9)  # sky
    tree = cKDTree(np.stack([cx, cy], axis=1))
    dist, _ = tree.query(np.stack([np.where(hit, gx, 0.0), np.where(hit, gy, 0.0)], axis=-1).reshape(-1, 2))
    on_road = (dist.reshape(gx.shape) <= half) & hit
    image[hit] = (0.3, 0.45, 0.25)
    image[on_road] = (0.35, 0.35, 0.35)
    r = np.floor((gy - bev.y_min) / bev.resolution)
    c = np.floor((gx - bev.x_min) / bev.resolution)
    in_bev = hit & (r >= 0) & (r < bev.ny) & (c >= 0) & (c < bev.nx)
    rr = np.where(in_bev, r, 0).astype(np.int64)
    cc = np.where(in_bev, c, 0).astype(np.int64)
    marked = in_bev & (seg[rr, cc] > 0)
    image[marked] = (0.95, 0.95, 0.95)
    return depth, image


def gen_scene(spec: SceneSpec, bev: BevConfig, cam: CameraModel, bins: DepthBinning = DepthBinning()) -> Scene:
    rng = np.random.default_rng(spec.seed)
    gt_map, center, geom = _build_map(spec, bev)
    seg, inst, dirs = label_rasters(gt_map, bev)
    cloud = simulate_lidar(spec, rng)
    depth, image = render_camera(cam, bins, bev, seg, geom)
    labels = {"seg": seg, "instance": inst, "direction": dirs, "depth": depth}
    return Scene(spec, gt_map, cloud, labels, image, center)


# ---------------------------------------------------------------- degraded predictions


@dataclass(frozen=True)
class NoiseModel:
    """Controls :func:`degrade_prediction`.

    ``dropout`` is the chance of losing a foreground cell.  With ``knee`` set,
    that chance ramps linearly from 0 at the knee to ``dropout`` at the far
    edge of the grid.  ``lateral_sigma`` jitters cells sideways (in cells),
    ``confidence_decay`` shrinks logit margins linearly with distance.
    """

    lateral_sigma: float = 0.0
    dropout: float = 0.0
    knee: float | None = None
    confidence_decay: float = 0.0
    margin: float = 8.0
    embed_spacing: float = 5.0


def instance_embedding(ids, dim: int, spacing: float = 5.0) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (dim,))
    fg = ids > 0
    k = ids[fg] - 1
    vec = np.zeros((k.size, dim))
    vec[np.arange(k.size), k % dim] = 1.0
    vec += (k // dim)[:, None]
    out[fg] = spacing * vec
    return out


def degrade_prediction(labels: dict, bev: BevConfig, noise: NoiseModel = NoiseModel(), seed: int = 0, embed_dim: int = 8):
    """Synthesize head outputs (seg logits, embeddings, direction logits) from label rasters."""
    rng = np.random.default_rng(seed)
    seg = np.asarray(labels["seg"], dtype=np.int64)
    inst = np.asarray(labels["instance"], dtype=np.int64)
    dirs = np.asarray(labels["direction"], dtype=np.int64)
    h, w = seg.shape
    xs = bev.x_min + (np.arange(w) + 0.5) * bev.resolution
    if noise.knee is None:
        p_drop = np.full(w, noise.dropout)
    else:
        ramp = np.clip((xs - noise.knee) / (bev.x_max - noise.knee), 0.0, 1.0)
        p_drop = noise.dropout * ramp
    u = rng.random((h, w))
    jitter = np.rint(rng.standard_normal((h, w)) * noise.lateral_sigma).astype(np.int64)

    out_seg = np.zeros_like(seg)
    out_inst = np.zeros_like(inst)
    out_dir = np.full_like(dirs, NO_DIRECTION)
    rows, cols = np.nonzero(seg > 0)
    survive = u[rows, cols] >= p_drop[cols]
    rows, cols = rows[survive], cols[survive]
    new_rows = rows + jitter[rows, cols]
    ok = (new_rows >= 0) & (new_rows < h)
    rows, cols, new_rows = rows[ok], cols[ok], new_rows[ok]
    out_seg[new_rows, cols] = seg[rows, cols]
    out_inst[new_rows, cols] = inst[rows, cols]
    out_dir[new_rows, cols] = dirs[rows, cols]

    margin = noise.margin * (1.0 - noise.confidence_decay * (xs - bev.x_min) / (bev.x_max - bev.x_min))
    seg_logits = np.zeros((h, w, len(CLASS_IDS) + 1))
    np.put_along_axis(seg_logits, out_seg[..., None], np.broadcast_to(margin, (h, w))[..., None], axis=-1)
    dir_logits = np.zeros((h, w, 36))
    lane = out_dir >= 0
    dir_logits[lane, out_dir[lane]] = noise.margin
    emb = instance_embedding(out_inst, embed_dim, noise.embed_spacing)
    return {
        "seg_logits": seg_logits.astype(np.float32),
        "embeddings": emb.astype(np.float32),
        "dir_logits": dir_logits.astype(np.float32),
    }


# ---------------------------------------------------------------- files


def write_scene(scene: Scene, out_dir, cam: CameraModel) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "gt_map.json", scene.gt_map.to_json())
    save_pc3f(out / "cloud.pc3f", scene.cloud)
    for name, arr in scene.labels.items():
        save_btf(out / f"{name}.btf", arr)
    save_btf(out / "image.btf", scene.image)
    save_btf(out / "centerline.btf", scene.centerline)
    meta = {"spec": scene.spec.to_dict(), "camera": cam.to_dict()}
    atomic_write_text(out / "scene.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_scene(scene_dir):
    """Load a scene directory; returns (Scene, CameraModel)."""
    d = Path(scene_dir)
    meta = json.loads(_read(d / "scene.json"))
    labels = {name: load_btf(d / f"{name}.btf") for name in ("seg", "instance", "direction", "depth")}
    for name in ("seg", "instance", "direction"):
        labels[name] = labels[name].astype(np.int64)
    gt_map = PolylineMap.from_json(_read(d / "gt_map.json").decode("utf-8"), source=str(d / "gt_map.json"))
    scene = Scene(
        SceneSpec.from_dict(meta["spec"]),
        gt_map,
        load_pc3f(d / "cloud.pc3f"),
        labels,
        load_btf(d / "image.btf"),
        load_btf(d / "centerline.btf").astype(np.float64),
    )
    return scene, CameraModel.from_dict(meta["camera"])
