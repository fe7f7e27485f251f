"""Multi-scale L2 flow supervision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..network import LevelState
from ..ops import add_scalars, l2_norm_sum, sum_squares
from ..tensor import Param, ShapeError, Tensor


def _default_weights() -> dict[int, float]:
    return {6: 0.32, 5: 0.08, 4: 0.02, 3: 0.01, 2: 0.005}


@dataclass
class LossConfig:
    level_weights: dict[int, float] = field(default_factory=_default_weights)
    weight_decay: float = 4e-4

    def __post_init__(self):
        if any(w < 0 for w in self.level_weights.values()):
            raise ValueError("level weights must be non-negative")
        if not any(w > 0 for w in self.level_weights.values()):
            raise ValueError("at least one level weight must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def downsample_flow(gt: np.ndarray, level: int) -> np.ndarray:
    """Average-pool a full-resolution flow by ``2**level`` and rescale to that level's pixels."""
    f = 2**level
    n, c, h, w = gt.shape
    if h % f or w % f:
        raise ShapeError(f"ground truth {h}x{w} is not divisible by 2**{level}")
    pooled = gt.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    return (pooled / f).astype(gt.dtype)


def multiscale_l2_loss(
    levels: Sequence[LevelState],
    gt_flow,
    cfg: LossConfig | None = None,
    params: Iterable[Param] = (),
) -> Tensor:
    """Weighted sum over levels of per-pixel endpoint distances, plus L2 weight decay.

    Pixel terms are summed over each image and averaged over the batch.
    """
    cfg = cfg or LossConfig()
    gt = gt_flow.data if isinstance(gt_flow, Tensor) else np.asarray(gt_flow)
    if gt.ndim != 4 or gt.shape[1] != 2:
        raise ShapeError(f"ground-truth flow must be (n, 2, H, W), got {gt.shape}")
    n = gt.shape[0]
    terms, weights = [], []
    for state in levels:
        if state.level not in cfg.level_weights:
            raise KeyError(f"no loss weight configured for level {state.level}")
        target = downsample_flow(gt, state.level).astype(state.flow.dtype)
        if target.shape != state.flow.shape:
            raise ShapeError(
                f"level {state.level} prediction {state.flow.shape} does not match ground truth {target.shape}"
            )
        terms.append(l2_norm_sum(state.flow, target))
        weights.append(cfg.level_weights[state.level] / n)
    if cfg.weight_decay:
        for p in params:
            terms.append(sum_squares(p))
            weights.append(cfg.weight_decay)
    return add_scalars(terms, weights)
