"""Differentiable numpy kernels used by the flow network.

All spatial ops take NCHW arrays.  Each op returns a :class:`Tensor` whose
adjoint is registered on the active tape (see :mod:`oasflow.tensor`).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Param, ShapeError, Tensor, note_regime, record

LEAKY_SLOPE = 0.1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")


# --------------------------------------------------------------------------- #
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channel-major patch matrix ``(c * kh * kw, n * ho * wo)`` of a padded input."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Param, bias: Param | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding, like ``torch.nn.functional.conv2d``."""
    _check_rank4(x, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4 (out_c, in_c, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d channel axis mismatch: input has {c} channels, weight expects in_c={ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match out_c={oc}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d height/width axis too small: {h}x{w} with kernel {kh}x{kw}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = weight.data.reshape(oc, -1)
    res = wm @ cols
    if bias is not None:
        res += bias.data[:, None]
    out = np.ascontiguousarray(res.reshape(oc, n, ho, wo).transpose(1, 0, 2, 3))

    def adjoint(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        dcols[:, i, j]
                    )
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, adjoint)


# --------------------------------------------------------------------------- #
# pointwise


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    pos = x.data >= 0
    note_regime(pos)
    out = np.where(pos, x.data, x.data * x.data.dtype.type(slope))

    def adjoint(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return record(out, (x,), adjoint)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so results stay strictly inside (0, 1)."""
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    fi = np.finfo(d.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)

    def adjoint(g):
        return (g * out * (1 - out),)

    return record(out, (x,), adjoint)


def _broadcast_adjoint(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def adjoint(g):
        return _broadcast_adjoint(g, a.shape), _broadcast_adjoint(g, b.shape)

    return record(out, (a, b), adjoint)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def adjoint(g):
        return _broadcast_adjoint(g, a.shape), -_broadcast_adjoint(g, b.shape)

    return record(out, (a, b), adjoint)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting (e.g. a 1-channel map times a volume)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def adjoint(g):
        ga = _broadcast_adjoint(g * b.data, a.shape) if a.requires_grad else None
        gb = _broadcast_adjoint(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), adjoint)


def one_minus(x: Tensor) -> Tensor:
    out = 1 - x.data
    return record(out, (x,), lambda g: (-g,))


def scale(x: Tensor, k: float) -> Tensor:
    k = x.data.dtype.type(k)
    return record(x.data * k, (x,), lambda g: (g * k,))


# --------------------------------------------------------------------------- #
# resampling


def _up2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    xp = np.concatenate(
        [np.take(x, [0], axis=axis), x, np.take(x, [n - 1], axis=axis)], axis=axis
    )

    def sl(a, b):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(a, b)
        return xp[tuple(idx)]

    even = 0.25 * sl(0, n) + 0.75 * sl(1, n + 1)
    odd = 0.75 * sl(1, n + 1) + 0.25 * sl(2, n + 2)
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape).astype(x.dtype, copy=False)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis : axis + 1] = [n, 2]
    gg = g.reshape(shape)
    ge = np.take(gg, 0, axis=axis + 1)
    go = np.take(gg, 1, axis=axis + 1)
    pshape = list(ge.shape)
    pshape[axis] = n + 2
    gp = np.zeros(pshape, dtype=g.dtype)

    def sl(a, b):
        idx = [slice(None)] * ge.ndim
        idx[axis] = slice(a, b)
        return tuple(idx)

    gp[sl(0, n)] += 0.25 * ge
    gp[sl(1, n + 1)] += 0.75 * ge + 0.75 * go
    gp[sl(2, n + 2)] += 0.25 * go
    gx = gp[sl(1, n + 1)].copy()
    gx[sl(0, 1)] += gp[sl(0, 1)]
    gx[sl(n - 1, n)] += gp[sl(n + 1, n + 2)]
    return gx


def upsample_bilinear_2x(x: Tensor, value_scale: float = 1.0) -> Tensor:
    """Double h and w with half-pixel-centre bilinear interpolation, then scale values.

    Output pixel ``i`` reads input coordinate ``(i + 0.5) / 2 - 0.5``, clamped
    to the border; use ``value_scale=2`` for flow fields.
    """
    _check_rank4(x, "upsample input")
    k = x.data.dtype.type(value_scale)
    out = _up2_axis(_up2_axis(x.data, 2), 3) * k

    def adjoint(g):
        return (_up2_axis_adjoint(_up2_axis_adjoint(g * k, 3), 2),)

    return record(out, (x,), adjoint)


def corner_weights(ax: np.ndarray, ay: np.ndarray):
    """Bilinear weights and their x/y derivatives for fractional parts ``ax, ay``.

    Corners are ordered (0, 0), (0, 1), (1, 0), (1, 1) as (dy, dx).
    """
    one = ax.dtype.type(1)
    out = []
    for dy, wy, dwy in ((0, one - ay, -one), (1, ay, one)):
        for dx, wx, dwx in ((0, one - ax, -one), (1, ax, one)):
            out.append((dy, dx, wx * wy, dwx * wy, wx * dwy))
    return out


def bilinear_corners(cx: np.ndarray, cy: np.ndarray, h: int, w: int):
    """Return the four (flat index, weight, d weight/dx, d weight/dy) corner tuples.

    Out-of-frame corners get weight 0 (zero padding); their index is clamped so
    gathers stay in bounds.
    """
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    note_regime(x0, y0)
    ax = (cx - x0).astype(cx.dtype)
    ay = (cy - y0).astype(cy.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx, wt, gx, gy in corner_weights(ax, ay):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        lin = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        corners.append((lin, np.where(valid, wt, 0), np.where(valid, gx, 0), np.where(valid, gy, 0)))
    return corners


def scatter_add_rows(values: np.ndarray, lin: np.ndarray, hw: int) -> np.ndarray:
    """Adjoint of a per-batch gather: ``values`` (n, c, p) added at ``lin`` (n, p)."""
    n, c, p = values.shape
    base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * hw
    idx = (base + lin[:, None, :]).reshape(-1)
    out = np.bincount(idx, weights=values.reshape(-1), minlength=n * c * hw)
    return out.reshape(n, c, hw).astype(values.dtype, copy=False)


def bilinear_sample(feature: Tensor, coords_x: Tensor, coords_y: Tensor) -> Tensor:
    """Read ``feature`` at fractional pixel coordinates with zero padding.

    ``coords_x``/``coords_y`` are ``(n, 1, h', w')``; the output is
    ``(n, c, h', w')``.  Differentiable with respect to the feature values and
    both coordinate maps.
    """
    _check_rank4(feature, "feature")
    n, c, h, w = feature.shape
    if coords_x.shape != coords_y.shape or coords_x.data.ndim != 4 or coords_x.shape[1] != 1:
        raise ShapeError(f"coordinate maps must both be (n, 1, h, w), got {coords_x.shape} and {coords_y.shape}")
    if coords_x.shape[0] != n:
        raise ShapeError(f"batch axis mismatch: feature n={n}, coordinates n={coords_x.shape[0]}")
    ho, wo = coords_x.shape[2:]
    p = ho * wo
    cx = coords_x.data.reshape(n, p).astype(feature.dtype, copy=False)
    cy = coords_y.data.reshape(n, p).astype(feature.dtype, copy=False)
    flat = feature.data.reshape(n, c, h * w)
    corners = bilinear_corners(cx, cy, h, w)
    vals = [np.take_along_axis(flat, lin[:, None, :], axis=2) for lin, _, _, _ in corners]
    out = vals[0] * corners[0][1][:, None, :]
    for v, (_, wt, _, _) in zip(vals[1:], corners[1:]):
        out += v * wt[:, None, :]

    def adjoint(g):
        g = g.reshape(n, c, p)
        gf = gxs = gys = None
        if feature.requires_grad:
            lin_all = np.concatenate([cr[0] for cr in corners], axis=1)
            contrib = np.concatenate([g * cr[1][:, None, :] for cr in corners], axis=2)
            gf = scatter_add_rows(contrib, lin_all, h * w).reshape(n, c, h, w)
        if coords_x.requires_grad or coords_y.requires_grad:
            gxs = np.zeros((n, p), dtype=g.dtype)
            gys = np.zeros((n, p), dtype=g.dtype)
            for v, (_, _, dwx, dwy) in zip(vals, corners):
                gv = (g * v).sum(axis=1)
                gxs += gv * dwx
                gys += gv * dwy
            gxs = gxs.reshape(coords_x.shape).astype(coords_x.dtype, copy=False)
            gys = gys.reshape(coords_y.shape).astype(coords_y.dtype, copy=False)
        return gf, gxs, gys

    return record(out.reshape(n, c, ho, wo), (feature, coords_x, coords_y), adjoint)


# --------------------------------------------------------------------------- #
# structure


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in parts:
        _check_rank4(t, "concat part")
    n, _, h, w = parts[0].shape
    for t in parts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels spatial/batch mismatch: {parts[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in parts], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in parts])

    def adjoint(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return record(out, tuple(parts), adjoint)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank4(x, "slice input")
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def adjoint(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record(out, (x,), adjoint)


# --------------------------------------------------------------------------- #
# reductions (rank-0 results)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return record(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def sum_squares(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(np.square(x.data, dtype=np.float64)), dtype=x.dtype)
    return record(out, (x,), lambda g: (2 * g * x.data,))


def l2_norm_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over batch and pixels of the channel-wise Euclidean norm of ``pred - target``.

    The adjoint at a zero residual is taken as 0.
    """
    diff = pred.data - target
    norm = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
    out = np.asarray(norm.sum(dtype=np.float64), dtype=pred.dtype)

    def adjoint(g):
        safe = np.where(norm > 0, norm, 1)
        return (np.where(norm > 0, g * diff / safe, 0).astype(pred.dtype),)

    return record(out, (pred,), adjoint)


def add_scalars(terms: Sequence[Tensor], weights: Sequence[float] | None = None) -> Tensor:
    """Weighted sum of rank-0 tensors."""
    if weights is None:
        weights = [1.0] * len(terms)
    dtype = terms[0].dtype
    out = np.asarray(sum(float(wt) * float(t.data) for t, wt in zip(terms, weights)), dtype=dtype)
    return record(out, tuple(terms), lambda g: tuple(g * dtype.type(wt) for wt in weights))
