"""Occlusion-aware reweighting and fusion of a raw cost volume."""

from __future__ import annotations

from dataclasses import dataclass

from .correlation import CostVolume
from .ops import add, conv2d, leaky_relu, mul, one_minus
from .tensor import Param, ShapeError, Tensor


@dataclass
class OAParams:
    """Two channel-preserving 3x3 convolutions, one per awareness branch."""

    conv1_w: Param
    conv1_b: Param
    conv2_w: Param
    conv2_b: Param

    def __post_init__(self):
        if self.conv1_w.shape != self.conv2_w.shape or self.conv1_b.shape != self.conv2_b.shape:
            raise ShapeError(
                f"conv1 and conv2 must share a shape, got {self.conv1_w.shape} and {self.conv2_w.shape}"
            )

    def params(self) -> list[Param]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]


def occlusion_aware_volume(c: CostVolume, occ: Tensor, params: OAParams) -> CostVolume:
    """Split ``c`` by the awareness map, filter each branch, fuse and activate.

    ``occ`` is ``(n, 1, h, w)`` and is broadcast over every cost channel.  The
    module computes ``lrelu(conv1(occ * c) + conv2((1 - occ) * c))``.
    """
    costs = c.costs
    n, d, h, w = costs.shape
    if occ.data.ndim != 4 or occ.shape != (n, 1, h, w):
        raise ShapeError(f"occlusion map must be ({n}, 1, {h}, {w}) to match the volume, got {occ.shape}")
    if params.conv1_w.shape[:2] != (d, d):
        raise ShapeError(f"occlusion convs expect {params.conv1_w.shape[1]} cost channels, volume has {d}")

    reversed_occ = one_minus(occ)
    occ_branch = mul(occ, costs)
    rev_branch = mul(reversed_occ, costs)
    filtered1 = conv2d(occ_branch, params.conv1_w, params.conv1_b, stride=1, pad=1)
    filtered2 = conv2d(rev_branch, params.conv2_w, params.conv2_b, stride=1, pad=1)
    return CostVolume(leaky_relu(add(filtered1, filtered2)), c.spec)
