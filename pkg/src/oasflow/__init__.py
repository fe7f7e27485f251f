"""Coarse-to-fine optical flow with sampling cost volumes and occlusion-aware fusion, in NumPy."""

from .correlation import SearchSpec, cost_volume_sampling, cost_volume_warping, warp
from .network import NetConfig, OASNet, count_parameters, init_params
from .occlusion import occlusion_aware_volume
from .tensor import Param, ParamStore, ShapeError, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "NetConfig", "OASNet", "Param", "ParamStore", "SearchSpec", "ShapeError", "Tape", "Tensor",
    "backward", "cost_volume_sampling", "cost_volume_warping", "count_parameters", "init_params",
    "occlusion_aware_volume", "warp",
]
