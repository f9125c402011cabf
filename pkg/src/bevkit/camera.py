"""Pinhole camera model, LiDAR-to-image projection, depth completion and binning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import DepthBinning
from .errors import CompletionError, ShapeError, ValidationError

SENTINEL = -1.0


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int
    extrinsic: tuple  # 4x4 LiDAR -> camera, as nested tuples so the model stays hashable

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if ext.shape != (4, 4):
            raise ValidationError("extrinsic must be 4x4")
        object.__setattr__(self, "extrinsic", tuple(map(tuple, ext.tolist())))
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_w and 0 <= self.cy < self.image_h):
            raise ValidationError("principal point outside the image")
        rot = ext[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-5) or np.linalg.det(rot) < 0:
            raise ValidationError("extrinsic rotation is not a proper rotation")
        if not np.allclose(ext[3], [0, 0, 0, 1]):
            raise ValidationError("extrinsic last row must be [0, 0, 0, 1]")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.extrinsic, dtype=np.float64)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def center_in_lidar(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def forward_facing(cls, image_w=88, image_h=32, height_above_lidar=-0.3, focal=None):
        """Front camera looking along LiDAR +x, camera axes x right / y down / z forward."""
        focal = focal if focal is not None else 60.0 * image_w / 88.0
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        center = np.array([0.0, 0.0, height_above_lidar])
        ext = np.eye(4)
        ext[:3, :3] = rot
        ext[:3, 3] = -rot @ center
        # horizon just above the principal row, so the first ground row lands at ~88 m
        return cls(focal, focal, image_w / 2.0, image_h * 0.3743, image_w, image_h, ext)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "image_w": self.image_w, "image_h": self.image_h,
            "extrinsic": [list(row) for row in self.extrinsic],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["image_w"]), int(d["image_h"]), d["extrinsic"])


@dataclass
class DepthImage:
    values: np.ndarray  # (H, W) float32, SENTINEL where no data
    dense: bool = False

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def to_camera(points, cam: CameraModel) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ cam.rotation.T + cam.translation


def project_points(cloud, cam: CameraModel) -> DepthImage:
    """Z-buffered sparse depth image of a LiDAR cloud; nearest return wins per pixel."""
    pc = to_camera(cloud, cam)
    z = pc[:, 2]
    front = z > 0
    pc, z = pc[front], z[front]
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    col = np.floor(u + 0.5).astype(np.int64)
    row = np.floor(v + 0.5).astype(np.int64)
    inside = (col >= 0) & (col < cam.image_w) & (row >= 0) & (row < cam.image_h)
    depth = np.full(cam.image_h * cam.image_w, np.inf)
    np.minimum.at(depth, row[inside] * cam.image_w + col[inside], z[inside])
    depth = np.where(np.isfinite(depth), depth, SENTINEL)
    return DepthImage(depth.reshape(cam.image_h, cam.image_w).astype(np.float32), dense=False)


def complete_depth(sparse: DepthImage) -> DepthImage:
    """Fill a sparse depth image with a reduced IP-Basic pipeline.

    1. 5x5 dilation taking the nearest depth in the window (empty pixels only).
    2. Column-wise extension: every empty pixel at or below the highest valid
       row takes the closest valid depth beneath it in its column, else the
       closest above; columns with no data copy the nearest filled column.
    3. 3x3 median over valid neighbours, applied to filled pixels only.

    Originally valid pixels are never modified.
    """
    vals = np.asarray(sparse.values, dtype=np.float64)
    orig = vals > 0
    if not orig.any():
        raise CompletionError("cannot complete a depth image with no valid pixels")
    if orig.all():
        return DepthImage(sparse.values.astype(np.float32).copy(), dense=True)

    big = np.where(orig, vals, np.inf)
    nearest = ndimage.minimum_filter(big, size=5, mode="constant", cval=np.inf)
    filled = np.where(orig, vals, nearest)

    valid = np.isfinite(filled)
    top = int(np.argmax(valid.any(axis=1)))
    h, w = filled.shape
    for c in range(w):
        col = filled[:, c]
        ok = np.isfinite(col)
        if not ok[top:].any():
            continue
        below = np.full(h, np.inf)
        carry = np.inf
        for r in range(h - 1, top - 1, -1):
            if ok[r]:
                carry = col[r]
            below[r] = carry
        above = np.full(h, np.inf)
        carry = np.inf
        for r in range(top, h):
            if ok[r]:
                carry = col[r]
            above[r] = carry
        fill = np.where(np.isfinite(below), below, above)
        rows = np.arange(h) >= top
        col[rows & ~ok] = fill[rows & ~ok]
    done_cols = np.isfinite(filled[top:]).all(axis=0)
    if not done_cols.all():
        have = np.flatnonzero(done_cols)
        for c in np.flatnonzero(~done_cols):
            src = have[np.argmin(np.abs(have - c))]
            missing = ~np.isfinite(filled[top:, c])
            filled[top:, c][missing] = filled[top:, src][missing]

    smoothed = filled.copy()
    padded = np.pad(filled, 1, constant_values=np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3)).reshape(h, w, 9)
    todo = np.isfinite(filled) & ~orig
    for r, c in zip(*np.nonzero(todo)):
        neigh = win[r, c]
        neigh = neigh[np.isfinite(neigh)]
        smoothed[r, c] = np.median(neigh)
    out = np.where(np.isfinite(smoothed), smoothed, SENTINEL)
    out[orig] = vals[orig]
    return DepthImage(out.astype(np.float32), dense=True)


def bin_depth(depth, bins: DepthBinning):
    """Depth bin index, or -1 outside [d_min, d_max).  Works on scalars and arrays."""
    d = np.asarray(depth, dtype=np.float64)
    ok = (d >= bins.d_min) & (d < bins.d_max)
    idx = np.floor((np.where(ok, d, bins.d_min) - bins.d_min) / bins.step).astype(np.int64)
    idx = np.where(ok, np.clip(idx, 0, bins.num_bins - 1), -1)
    return int(idx) if idx.ndim == 0 else idx


def bin_center(index, bins: DepthBinning):
    return bins.d_min + (np.asarray(index) + 0.5) * bins.step


def one_hot_depth_map(dense: DepthImage, bins: DepthBinning, out_w: int, out_h: int) -> np.ndarray:
    """Block-subsampled one-hot depth targets of shape (out_h, out_w, num_bins).

    Each output cell samples the image pixel at the centre of its block.
    Cells whose depth falls outside the binning range are all-zero.
    """
    h, w = dense.values.shape
    if h % out_h or w % out_w:
        raise ShapeError(f"output {out_h}x{out_w} does not divide image {h}x{w}")
    sh, sw = h // out_h, w // out_w
    sample = dense.values[sh // 2 :: sh, sw // 2 :: sw][:out_h, :out_w]
    idx = bin_depth(np.where(sample > 0, sample, -np.inf), bins)
    out = np.zeros((out_h, out_w, bins.num_bins), dtype=np.float32)
    r, c = np.nonzero(idx >= 0)
    out[r, c, idx[r, c]] = 1.0
    return out
