"""Matching cost volumes over a square search window.

Two constructions are provided:

* :func:`cost_volume_warping` warps the target feature by the current flow
  and then correlates it with the source feature at integer offsets.
* :func:`cost_volume_sampling` skips the intermediate warped map and samples
  the target feature directly at ``x + flow(x) + d`` for every offset ``d``.

The cost channel index enumerates offsets row-major, ``dy`` outer, both
running from ``-radius`` to ``+radius``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .ops import add, bilinear_sample, corner_weights, slice_channels
from .tensor import ShapeError, Tensor, note_regime, record


@dataclass(frozen=True)
class SearchSpec:
    radius: int = 4
    normalize: bool = True

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"search radius must be >= 0, got {self.radius}")

    @property
    def channels(self) -> int:
        return (2 * self.radius + 1) ** 2

    def offsets(self) -> list[tuple[int, int]]:
        """(dy, dx) pairs in channel order."""
        r = self.radius
        return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    def channel_of(self, dy: int, dx: int) -> int:
        r = self.radius
        if max(abs(dy), abs(dx)) > r:
            raise ValueError(f"offset ({dy}, {dx}) outside radius {r}")
        return (dy + r) * (2 * r + 1) + (dx + r)


@dataclass
class CostVolume:
    costs: Tensor
    spec: SearchSpec

    @property
    def shape(self):
        return self.costs.shape


def _check_pair(f1: Tensor, f2: Tensor, flow: Tensor) -> None:
    if f1.data.ndim != 4 or f1.shape != f2.shape:
        raise ShapeError(f"source and target features must share one rank-4 shape, got {f1.shape} and {f2.shape}")
    n, _, h, w = f1.shape
    if flow.data.ndim != 4 or flow.shape != (n, 2, h, w):
        raise ShapeError(f"flow must be ({n}, 2, {h}, {w}) to match the features, got {flow.shape}")


def pixel_grid(n: int, h: int, w: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Absolute (x, y) pixel coordinates, each shaped (n, 1, h, w)."""
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return (np.broadcast_to(xs, (n, 1, h, w)).copy(), np.broadcast_to(ys, (n, 1, h, w)).copy())


def _flow_coords(flow: Tensor):
    """Differentiable ``x + u`` and ``y + v`` coordinate maps."""
    n, _, h, w = flow.shape
    gx, gy = pixel_grid(n, h, w, flow.dtype)
    cx = add(slice_channels(flow, 0, 1), Tensor(gx))
    cy = add(slice_channels(flow, 1, 2), Tensor(gy))
    return cx, cy


def warp(target: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``target`` toward the source frame: ``out(x) = target(x + flow(x))``."""
    if target.data.ndim != 4 or flow.data.ndim != 4:
        raise ShapeError(f"warp expects rank-4 target and flow, got {target.shape} and {flow.shape}")
    n, _, h, w = target.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"flow must be ({n}, 2, {h}, {w}) to match the target, got {flow.shape}")
    cx, cy = _flow_coords(flow)
    return bilinear_sample(target, cx, cy)


def local_correlation(f1: Tensor, g: Tensor, spec: SearchSpec) -> Tensor:
    """``cost(x, d) = <f1(x), g(x + d)>`` with zero padding outside the frame."""
    if f1.shape != g.shape:
        raise ShapeError(f"correlation inputs differ in shape: {f1.shape} vs {g.shape}")
    n, c, h, w = f1.shape
    r = spec.radius
    norm = f1.dtype.type(1.0 / c if spec.normalize else 1.0)
    gp = np.pad(g.data, ((0, 0), (0, 0), (r, r), (r, r)))
    offsets = spec.offsets()
    out = np.empty((n, len(offsets), h, w), dtype=f1.dtype)
    for k, (dy, dx) in enumerate(offsets):
        win = gp[:, :, r + dy : r + dy + h, r + dx : r + dx + w]
        out[:, k] = np.sum(f1.data * win, axis=1) * norm

    def adjoint(gout):
        gf1 = np.zeros_like(f1.data) if f1.requires_grad else None
        ggp = np.zeros_like(gp) if g.requires_grad else None
        for k, (dy, dx) in enumerate(offsets):
            gk = gout[:, k : k + 1] * norm
            if gf1 is not None:
                gf1 += gk * gp[:, :, r + dy : r + dy + h, r + dx : r + dx + w]
            if ggp is not None:
                ggp[:, :, r + dy : r + dy + h, r + dx : r + dx + w] += gk * f1.data
        gg = np.ascontiguousarray(ggp[:, :, r : r + h, r : r + w]) if ggp is not None else None
        return gf1, gg

    return record(out, (f1, g), adjoint)


def cost_volume_warping(f1: Tensor, f2: Tensor, flow: Tensor, spec: SearchSpec) -> CostVolume:
    """Warp ``f2`` by ``flow`` once, then correlate against ``f1`` at every offset."""
    _check_pair(f1, f2, flow)
    f_warp = warp(f2, flow)
    return CostVolume(local_correlation(f1, f_warp, spec), spec)


def cost_volume_sampling(f1: Tensor, f2: Tensor, flow: Tensor, spec: SearchSpec) -> CostVolume:
    """Correlate ``f1(x)`` with ``f2`` bilinearly sampled at ``x + flow(x) + d``.

    Every offset of one pixel shares the fractional part of ``x + flow(x)``, so
    the target is read once on the ``(2r + 2)**2`` integer patch that covers
    all bilinear corners of all offsets.  Patch inner products are then blended
    with the four corner weights.
    """
    _check_pair(f1, f2, flow)
    n, c, h, w = f1.shape
    p = h * w
    r = spec.radius
    side = 2 * r + 1
    ps = side + 1
    dt = f1.dtype
    norm = dt.type(1.0 / c if spec.normalize else 1.0)

    gx, gy = pixel_grid(n, h, w, dt)
    bx = (gx + flow.data[:, 0:1]).reshape(n, 1, 1, p)
    by = (gy + flow.data[:, 1:2]).reshape(n, 1, 1, p)
    x0 = np.floor(bx)
    y0 = np.floor(by)
    note_regime(x0, y0)
    weights = corner_weights((bx - x0).astype(dt), (by - y0).astype(dt))
    span = np.arange(-r, r + 2)
    xi = x0.astype(np.int64) + span[None, None, :, None]
    yi = y0.astype(np.int64) + span[None, :, None, None]
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)  # (n, ps, ps, p)
    lin = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
    lin = lin.reshape(n, ps * ps * p)

    # channel-last copies so each gather reads one contiguous feature vector
    f1t = np.ascontiguousarray(f1.data.reshape(n, c, p).transpose(0, 2, 1))
    f2t = np.ascontiguousarray(f2.data.reshape(n, c, p).transpose(0, 2, 1))
    vals = np.stack([f2t[b][lin[b]] for b in range(n)]).reshape(n, ps, ps, p, c)
    dots = np.einsum("nabpc,npc->nabp", vals, f1t) * norm
    dots *= valid

    cost = np.zeros((n, side, side, p), dtype=dt)
    for cy_, cx_, wt, _, _ in weights:
        cost += wt * dots[:, cy_ : cy_ + side, cx_ : cx_ + side]

    def adjoint(g):
        g = g.reshape(n, side, side, p)
        gflow = gf1 = gf2 = None
        if flow.requires_grad:
            gu = np.zeros((n, p), dtype=dt)
            gv = np.zeros((n, p), dtype=dt)
            for cy_, cx_, _, dwx, dwy in weights:
                gd = np.sum(g * dots[:, cy_ : cy_ + side, cx_ : cx_ + side], axis=(1, 2))
                gu += gd * dwx[:, 0, 0]
                gv += gd * dwy[:, 0, 0]
            gflow = np.stack([gu.reshape(n, h, w), gv.reshape(n, h, w)], axis=1).astype(flow.dtype, copy=False)
        if f1.requires_grad or f2.requires_grad:
            gdots = np.zeros((n, ps, ps, p), dtype=dt)
            for cy_, cx_, wt, _, _ in weights:
                gdots[:, cy_ : cy_ + side, cx_ : cx_ + side] += wt * g
            gdots *= valid
            gdots *= norm
            if f1.requires_grad:
                gf1t = np.einsum("nabp,nabpc->npc", gdots, vals)
                gf1 = np.ascontiguousarray(gf1t.transpose(0, 2, 1)).reshape(f1.shape)
            if f2.requires_grad:
                cols = np.tile(np.arange(p), ps * ps)
                gf2 = np.empty((n, c, p), dtype=dt)
                for b in range(n):
                    m = sparse.csr_matrix((gdots[b].reshape(-1), (lin[b], cols)), shape=(p, p))
                    gf2[b] = (m @ f1t[b]).T
                gf2 = gf2.reshape(f2.shape)
        return gf1, gf2, gflow

    costs = record(cost.reshape(n, side * side, h, w), (f1, f2, flow), adjoint)
    return CostVolume(costs, spec)
