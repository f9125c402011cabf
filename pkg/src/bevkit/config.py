"""Configuration records and their JSON (de)serialization.

Every record validates itself on construction.  ``RunConfig.from_dict``
rejects unknown keys at every nesting level.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError


def _close_to_int(value: float, tol: float = 1e-6) -> bool:
    return abs(value - round(value)) < tol


@dataclass(frozen=True)
class BevConfig:
    """Metric extent and resolution of the bird's-eye-view grid.

    Rows index the lateral axis (y, increasing with row), columns index the
    forward axis (x, increasing with column).
    """

    x_min: float = 0.0
    x_max: float = 90.0
    y_min: float = -15.0
    y_max: float = 15.0
    resolution: float = 0.15

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigError("bev resolution must be positive")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ConfigError("bev ranges must be increasing")
        for span in (self.x_max - self.x_min, self.y_max - self.y_min):
            if not _close_to_int(span / self.resolution):
                raise ConfigError(
                    f"bev span {span} is not a whole number of {self.resolution} m cells"
                )

    @classmethod
    def toy(cls) -> "BevConfig":
        return cls(resolution=0.75)

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def cell_of(self, x, y):
        """Return (row, col) float indices; floor them to get the cell."""
        return (y - self.y_min) / self.resolution, (x - self.x_min) / self.resolution

    def cell_center(self, row, col):
        return (
            self.x_min + (col + 0.5) * self.resolution,
            self.y_min + (row + 0.5) * self.resolution,
        )


@dataclass(frozen=True)
class DepthBinning:
    d_min: float = 2.0
    d_max: float = 90.0
    step: float = 1.0

    def __post_init__(self):
        if self.step <= 0 or self.d_max <= self.d_min:
            raise ConfigError("depth binning needs d_max > d_min and step > 0")
        if not _close_to_int((self.d_max - self.d_min) / self.step):
            raise ConfigError("depth range must be a whole number of steps")

    @property
    def num_bins(self) -> int:
        return int(round((self.d_max - self.d_min) / self.step))

    def centers(self):
        import numpy as np

        return self.d_min + (np.arange(self.num_bins) + 0.5) * self.step


@dataclass(frozen=True)
class LossWeights:
    lambda_dep: float = 1.0
    lambda_seg: float = 1.0
    lambda_ins: float = 1.0
    lambda_dir: float = 0.2
    alpha: float = 1.0
    beta: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 3.0
    gamma: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")
        if self.delta_d <= self.delta_v:
            raise ConfigError("delta_d must exceed delta_v")


@dataclass(frozen=True)
class MatchThresholds:
    cd_max: float = 1.0
    iou_min: float = 0.1

    def __post_init__(self):
        if self.cd_max <= 0:
            raise ConfigError("cd_max must be positive")
        if not 0 < self.iou_min < 1:
            raise ConfigError("iou_min must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str) -> "MatchThresholds":
        """Parse the ``cd=1.0,iou=0.1`` override syntax."""
        values = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, raw = part.partition("=")
            key = {"cd": "cd_max", "iou": "iou_min"}.get(key.strip())
            if key is None:
                raise ConfigError(f"unknown threshold in {text!r}")
            try:
                values[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad threshold value in {text!r}") from exc
        return cls(**values)


@dataclass(frozen=True)
class IntervalSpec:
    breaks: tuple[float, ...] = (0.0, 30.0, 60.0, 90.0)

    def __post_init__(self):
        b = tuple(float(v) for v in self.breaks)
        object.__setattr__(self, "breaks", b)
        if len(b) < 2 or any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise ConfigError("interval breaks must be strictly increasing")

    @property
    def intervals(self) -> list[tuple[float, float]]:
        return list(zip(self.breaks, self.breaks[1:]))


@dataclass(frozen=True)
class EvalConfig:
    intervals: IntervalSpec = field(default_factory=IntervalSpec)
    cd_cap: float = 5.0
    sample_step: float = 0.15
    line_radius: int = 0
    match_radius: int = 1

    def __post_init__(self):
        if self.cd_cap <= 0 or self.sample_step <= 0:
            raise ConfigError("cd_cap and sample_step must be positive")
        if self.line_radius < 0 or self.match_radius < 0:
            raise ConfigError("raster radii must be nonnegative")


@dataclass(frozen=True)
class VectorizeConfig:
    seg_threshold: float = 0.5
    eps: float = 1.5
    min_pts: int = 3
    nms_iou: float = 0.3
    search_radius: float = 5.0
    angle_tol_deg: float = 45.0
    nms_radius: int = 1

    def __post_init__(self):
        if self.eps <= 0 or self.min_pts < 1:
            raise ConfigError("dbscan needs eps > 0 and min_pts >= 1")
        if not 0 <= self.seg_threshold <= 1 or not 0 <= self.nms_iou <= 1:
            raise ConfigError("thresholds must lie in [0, 1]")
        if self.search_radius <= 0:
            raise ConfigError("search_radius must be positive")


@dataclass(frozen=True)
class DwaConfig:
    v_max: float = 8.0
    omega_max: float = 1.0
    accel_v: float = 4.0
    accel_omega: float = 2.0
    dt: float = 0.2
    horizon: float = 2.0
    v_samples: int = 11
    omega_samples: int = 21
    w_heading: float = 1.0
    w_clearance: float = 0.4
    w_velocity: float = 0.2
    goal_tolerance: float = 1.5
    stall_steps: int = 5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"dwa parameter {f.name} must be positive")
        if self.horizon < self.dt:
            raise ConfigError("dwa horizon must be at least dt")
        if self.v_samples < 2 or self.omega_samples < 2:
            raise ConfigError("dwa needs at least two samples per axis")


@dataclass(frozen=True)
class ModelConfig:
    """Channel widths and image sizes of the desk-scale network."""

    image_h: int = 32
    image_w: int = 88
    feat_h: int = 8
    feat_w: int = 22
    c_f: int = 8
    c_l: int = 8
    c_b: int = 16
    d_k: int = 8
    c_reduce: int = 8
    c_flow: int = 16
    c_head: int = 16
    num_classes: int = 4
    embed_dim: int = 8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"model size {f.name} must be positive")
        if self.image_h != 4 * self.feat_h or self.image_w != 4 * self.feat_w:
            raise ConfigError("camera stem downsamples by exactly 4")


@dataclass(frozen=True)
class RunConfig:
    bev: BevConfig = field(default_factory=BevConfig.toy)
    bins: DepthBinning = field(default_factory=DepthBinning)
    loss: LossWeights = field(default_factory=LossWeights)
    vectorize: VectorizeConfig = field(default_factory=VectorizeConfig)
    thresholds: MatchThresholds = field(default_factory=MatchThresholds)
    eval: EvalConfig = field(default_factory=EvalConfig)
    planner: DwaConfig = field(default_factory=DwaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.bev.nx % 4 or self.bev.ny % 4:
            raise ConfigError("bev grid extents must be divisible by 4")

    def to_dict(self) -> dict[str, Any]:
        return _to_dict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _from_dict(cls, data, "config")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(data)


def _to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_dict(v) for v in obj]
    return obj


_NESTED = {
    "bev": BevConfig,
    "bins": DepthBinning,
    "loss": LossWeights,
    "vectorize": VectorizeConfig,
    "thresholds": MatchThresholds,
    "eval": EvalConfig,
    "intervals": IntervalSpec,
    "planner": DwaConfig,
    "model": ModelConfig,
}


def _from_dict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get(name)
        if sub is not None and dataclasses.is_dataclass(sub) and name in known:
            if sub is IntervalSpec and isinstance(value, list):
                value = {"breaks": value}
            kwargs[name] = _from_dict(sub, value, f"{where}.{name}")
        elif name == "breaks":
            kwargs[name] = tuple(value)
        else:
            default = known[name].default
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name} must be a number")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"{where}.{name} must be an integer")
            if not math.isfinite(value):
                raise ConfigError(f"{where}.{name} must be finite")
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
