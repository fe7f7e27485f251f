from __future__ import annotations

import numpy as np

from ..tensor import ShapeError, Tensor


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def epe(pred, gt, mask=None) -> float:
    """Mean endpoint error over pixels (optionally only where ``mask`` is true)."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    err = np.sqrt(np.sum((p.astype(np.float64) - g) ** 2, axis=1))  # (n, h, w)
    if mask is None:
        return float(err.mean())
    m = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(-1, *err.shape[1:]), err.shape)
    if not m.any():
        raise ValueError("epe mask selects no pixels")
    return float(err[m].mean())


def point_biserial(values: np.ndarray, labels: np.ndarray) -> float:
    """Pearson correlation between a continuous map and a binary mask (NaN if either is constant)."""
    x = np.asarray(values, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])
