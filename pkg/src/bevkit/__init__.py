"""Camera-LiDAR BEV fusion for long-range vector map generation, at desk scale.

Modules: ``tensor`` (numpy ops with pullbacks), ``camera`` (projection, depth
completion, binning), ``fusion`` (lift-splat, cross-attention, flow
alignment), ``losses``, ``vectorize``, ``metrics``, ``planner``, ``synth``
(procedural scenes), ``render`` and ``cli``.
"""

from .config import BevConfig, DepthBinning, DwaConfig, LossWeights, MatchThresholds, ModelConfig, RunConfig
from .errors import BevkitError

__version__ = "0.1.0"

__all__ = [
    "BevConfig",
    "BevkitError",
    "DepthBinning",
    "DwaConfig",
    "LossWeights",
    "MatchThresholds",
    "ModelConfig",
    "RunConfig",
    "__version__",
]
