"""Layered synthetic image pairs with exact flow and occlusion ground truth.

A scene is a textured background plus a few textured rectangles, each moving
by its own translation.  Frame 2 is composited on the pixel grid directly;
frame 1 reads every layer's texture at ``x + t`` with bilinear interpolation,
so ``im2`` sampled at ``x + gt_flow(x)`` reproduces ``im1(x)`` wherever all
bilinear support pixels still belong to the same layer in frame 2.  Pixels
where that fails (covered by a nearer layer, or leaving the frame) are marked
in ``gt_occ``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    bg_max_shift: float = 4.0
    fractional: bool = True
    fg_count: tuple[int, int] = (1, 3)
    fg_max_shift: float = 8.0
    fg_size: tuple[int, int] = (12, 32)
    thin: bool = False
    thin_width: tuple[int, int] = (2, 5)


@dataclass
class SyntheticSample:
    im1: np.ndarray  # (1, 3, H, W) in [0, 1]
    im2: np.ndarray
    gt_flow: np.ndarray  # (1, 2, H, W), pixels
    gt_occ: np.ndarray  # (1, 1, H, W), 1 = occluded in im1


@dataclass
class Layer:
    texture: np.ndarray  # (3, H + 2m, W + 2m), frame-2 coordinates offset by the margin
    shift: tuple[float, float]  # (tx, ty)
    rect: tuple[int, int, int, int] | None  # (top, left, height, width) in frame 2; None = everywhere


def noise_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Multi-scale smoothed colour noise in [0, 1]."""
    base = rng.uniform(0.2, 0.8, size=3)
    tex = np.zeros((3, h, w))
    for sigma, amp in ((0.7, 0.35), (2.0, 0.5), (5.0, 0.6)):
        noise = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, sigma, sigma), mode="wrap")
        tex += amp * noise / (noise.std() + 1e-12)
    tex = base[:, None, None] + 0.15 * tex
    return np.clip(tex, 0.0, 1.0)


def _draw_shift(rng: np.random.Generator, max_shift: float, fractional: bool) -> tuple[float, float]:
    s = rng.uniform(-max_shift, max_shift, size=2)
    if not fractional:
        s = np.round(s)
    return float(s[0]), float(s[1])


def make_layers(seed: int, cfg: SceneConfig) -> list[Layer]:
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    m = int(np.ceil(max(cfg.bg_max_shift, cfg.fg_max_shift))) + 2
    layers = [Layer(noise_texture(rng, h + 2 * m, w + 2 * m), _draw_shift(rng, cfg.bg_max_shift, cfg.fractional), None)]
    count = int(rng.integers(cfg.fg_count[0], cfg.fg_count[1] + 1))
    shifts = {layers[0].shift}
    for _ in range(count):
        shift = _draw_shift(rng, cfg.fg_max_shift, cfg.fractional)
        while shift in shifts and cfg.fg_max_shift > 0:
            shift = _draw_shift(rng, cfg.fg_max_shift, cfg.fractional)
        shifts.add(shift)
        lo, hi = cfg.fg_size
        rh, rw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        if cfg.thin:
            thin = int(rng.integers(cfg.thin_width[0], cfg.thin_width[1] + 1))
            if rng.random() < 0.5:
                rw = thin
            else:
                rh = thin
        rh, rw = min(rh, h), min(rw, w)
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        layers.append(Layer(noise_texture(rng, h + 2 * m, w + 2 * m), shift, (top, left, rh, rw)))
    return layers


def _margin(layer: Layer, h: int) -> int:
    return (layer.texture.shape[1] - h) // 2


def _sample_texture(layer: Layer, xs: np.ndarray, ys: np.ndarray, margin: int) -> np.ndarray:
    """Bilinear read of the layer texture at frame-2 coordinates (xs, ys); shape (3, ...)."""
    tx = xs + margin
    ty = ys + margin
    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    ax = tx - x0
    ay = ty - y0
    t = layer.texture
    x1 = np.minimum(x0 + 1, t.shape[2] - 1)
    y1 = np.minimum(y0 + 1, t.shape[1] - 1)
    return (
        t[:, y0, x0] * ((1 - ax) * (1 - ay))
        + t[:, y0, x1] * (ax * (1 - ay))
        + t[:, y1, x0] * ((1 - ax) * ay)
        + t[:, y1, x1] * (ax * ay)
    )


def render(layers: list[Layer], h: int, w: int) -> SyntheticSample:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    margin = _margin(layers[0], h)

    # frame 2: topmost owner per grid pixel, texture read without interpolation
    owner2 = np.zeros((h, w), dtype=np.int64)
    for idx, layer in enumerate(layers[1:], start=1):
        top, left, rh, rw = layer.rect
        owner2[top : top + rh, left : left + rw] = idx
    im2 = np.empty((3, h, w))
    for idx, layer in enumerate(layers):
        sel = owner2 == idx
        im2[:, sel] = layer.texture[:, margin:margin + h, margin:margin + w][:, sel]

    # frame 1: a rectangle owns x when x + t lands inside its frame-2 extent
    owner1 = np.zeros((h, w), dtype=np.int64)
    for idx, layer in enumerate(layers[1:], start=1):
        top, left, rh, rw = layer.rect
        tx, ty = layer.shift
        inside = (xs + tx >= left) & (xs + tx <= left + rw - 1) & (ys + ty >= top) & (ys + ty <= top + rh - 1)
        owner1[inside] = idx

    im1 = np.empty((3, h, w))
    flow = np.empty((2, h, w))
    occ = np.zeros((h, w), dtype=bool)
    for idx, layer in enumerate(layers):
        sel = owner1 == idx
        if not sel.any():
            continue
        tx, ty = layer.shift
        px, py = xs[sel] + tx, ys[sel] + ty
        im1[:, sel] = _sample_texture(layer, px, py, margin)
        flow[0, sel] = tx
        flow[1, sel] = ty
        # every bilinear corner with non-zero weight must be in frame and still owned by this layer
        x0, y0 = np.floor(px).astype(np.int64), np.floor(py).astype(np.int64)
        bad = np.zeros(px.shape, dtype=bool)
        for cx, cy, used in ((x0, y0, np.ones_like(bad)),
                             (x0 + 1, y0, px > x0),
                             (x0, y0 + 1, py > y0),
                             (x0 + 1, y0 + 1, (px > x0) & (py > y0))):
            out = (cx < 0) | (cx >= w) | (cy < 0) | (cy >= h)
            own = owner2[np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)]
            bad |= used & (out | (own != idx))
        occ[sel] = bad

    return SyntheticSample(
        im1=im1[None].astype(np.float32),
        im2=im2[None].astype(np.float32),
        gt_flow=flow[None].astype(np.float32),
        gt_occ=occ[None, None].astype(np.float32),
    )


def gen_synthetic_pair(seed: int, cfg: SceneConfig | None = None) -> SyntheticSample:
    """Render one deterministic scene for ``seed``."""
    cfg = cfg or SceneConfig()
    return render(make_layers(seed, cfg), cfg.height, cfg.width)


def hflip(sample: SyntheticSample) -> SyntheticSample:
    flow = sample.gt_flow[..., ::-1].copy()
    flow[:, 0] *= -1
    return SyntheticSample(
        sample.im1[..., ::-1].copy(), sample.im2[..., ::-1].copy(), flow, sample.gt_occ[..., ::-1].copy()
    )


def crop(sample: SyntheticSample, top: int, left: int, h: int, w: int) -> SyntheticSample:
    """Crop both frames; pixels whose match now leaves the crop become occluded."""
    sl = (Ellipsis, slice(top, top + h), slice(left, left + w))
    flow = sample.gt_flow[sl].copy()
    occ = sample.gt_occ[sl].copy()
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    px = xs + flow[0, 0]
    py = ys + flow[0, 1]
    leaves = (px < 0) | (py < 0) | (np.ceil(px) > w - 1) | (np.ceil(py) > h - 1)
    occ[0, 0][leaves] = 1.0
    return SyntheticSample(sample.im1[sl].copy(), sample.im2[sl].copy(), flow, occ)


def augment(sample: SyntheticSample, rng: np.random.Generator, out_h: int, out_w: int,
            flip: bool = True) -> SyntheticSample:
    """Random crop to ``out_h x out_w`` followed by an optional random horizontal flip."""
    h, w = sample.im1.shape[2:]
    top = int(rng.integers(0, h - out_h + 1))
    left = int(rng.integers(0, w - out_w + 1))
    out = crop(sample, top, left, out_h, out_w) if (h, w) != (out_h, out_w) else sample
    if flip and rng.random() < 0.5:
        out = hflip(out)
    return out
