"""Binary PGM/PPM renderings of rasters and vector maps.

Images show the BEV with the forward axis pointing up and +y (left) to the left.
"""

from __future__ import annotations

import numpy as np

from .config import BevConfig
from .errors import ShapeError
from .io import atomic_write_bytes
from .maps import PolylineMap, rasterize_polyline

BACKGROUND = (0, 0, 0)
PALETTE = {
    "boundary": (0, 200, 0),
    "divider": (220, 0, 0),
    "crossing": (0, 80, 255),
    "path": (255, 200, 0),
}
# later classes paint over earlier ones
_PAINT_ORDER = ("crossing", "divider", "boundary", "path")


def bev_to_image(grid):
    """Reorient a (rows=y, cols=x, ...) grid so forward is up and left is left."""
    g = np.asarray(grid)
    return np.flip(np.swapaxes(g, 0, 1), axis=(0, 1))


def encode_pgm(raster) -> bytes:
    """8-bit grayscale; values are scaled linearly so the maximum maps to 255."""
    a = np.asarray(raster, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D raster, got shape {a.shape}")
    a = np.where(np.isfinite(a), a, 0.0)
    lo = min(float(a.min()), 0.0) if a.size else 0.0
    hi = float(a.max()) if a.size else 0.0
    if hi > lo:
        img = np.rint((a - lo) / (hi - lo) * 255.0)
    else:
        img = np.zeros_like(a)
    img = img.astype(np.uint8)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii") + img.tobytes()


def encode_ppm(rgb) -> bytes:
    img = np.asarray(rgb, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM needs an (H, W, 3) image, got shape {img.shape}")
    return f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii") + img.tobytes()


def render_map(pmap: PolylineMap, bev: BevConfig, radius: int = 0) -> np.ndarray:
    """Colour raster (H, W, 3) of a map in image orientation."""
    canvas = np.zeros(bev.shape + (3,), dtype=np.uint8)
    canvas[...] = BACKGROUND
    for name in _PAINT_ORDER:
        for inst in pmap.of_class(name):
            canvas[rasterize_polyline(inst.points, bev, radius)] = PALETTE[name]
    return np.ascontiguousarray(bev_to_image(canvas))


def render_raster(raster, bev_oriented: bool = True) -> np.ndarray:
    a = np.asarray(raster)
    if a.ndim == 3:
        # multi-channel tensors render as their per-cell argmax
        a = np.argmax(a, axis=-1)
    return np.ascontiguousarray(bev_to_image(a)) if bev_oriented else a


def write_pgm(path, raster, bev_oriented: bool = True) -> None:
    atomic_write_bytes(path, encode_pgm(render_raster(raster, bev_oriented)))


def write_map_ppm(path, pmap: PolylineMap, bev: BevConfig, radius: int = 0) -> None:
    atomic_write_bytes(path, encode_ppm(render_map(pmap, bev, radius)))


def decode_pnm(data: bytes) -> np.ndarray:
    """Parse a binary P5/P6 file written by this module."""
    magic, dims, maxval, rest = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if magic == b"P5":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    raise ShapeError(f"unsupported image magic {magic!r}")
