"""Ghosting demonstration on a built-in two-layer scene.

A textured square moves 20 px right over a static background.  Backward
warping the second frame by the true flow copies the square to its new
position *and* leaves a second copy where the background pixels of frame 1
look up their (zero-motion) match.  The sampling volume reads the target
directly at ``x + flow(x) + d`` and is not affected.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correlation import SearchSpec, cost_volume_sampling, cost_volume_warping, warp
from .io.images import write_image
from .io.viz import flow_to_color
from .tensor import Tensor
from .training.synthetic import Layer, SyntheticSample, noise_texture, render

SIZE = 64
SQUARE = (24, 30, 16, 16)  # frame-2 (top, left, height, width)
SHIFT = (20.0, 0.0)
RADIUS = 4
NCC_DUPLICATE = 0.9


@dataclass
class GhostingScene:
    sample: SyntheticSample
    square: tuple[int, int, int, int]
    shift: tuple[float, float]

    def frame1_box(self) -> tuple[slice, slice]:
        top, left, h, w = self.square
        dx, dy = (int(s) for s in self.shift)
        return slice(top - dy, top - dy + h), slice(left - dx, left - dx + w)

    def frame2_box(self) -> tuple[slice, slice]:
        top, left, h, w = self.square
        return slice(top, top + h), slice(left, left + w)


def ghosting_scene(seed: int = 3) -> GhostingScene:
    rng = np.random.default_rng(seed)
    margin = int(max(SHIFT)) + 2
    side = SIZE + 2 * margin
    layers = [Layer(noise_texture(rng, side, side), (0.0, 0.0), None),
              Layer(noise_texture(rng, side, side), SHIFT, SQUARE)]
    return GhostingScene(render(layers, SIZE, SIZE), SQUARE, SHIFT)


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel() - a.mean()
    b = b.astype(np.float64).ravel() - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def patch_descriptors(img: np.ndarray, k: int = 3) -> np.ndarray:
    """Unit-norm, zero-mean k x k colour patches per pixel, so dot products act like NCC."""
    n, c, h, w = img.shape
    r = k // 2
    pad = np.pad(img, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    cols = [pad[:, :, dy:dy + h, dx:dx + w] for dy in range(k) for dx in range(k)]
    desc = np.concatenate(cols, axis=1)
    desc = desc - desc.mean(axis=1, keepdims=True)
    norm = np.sqrt((desc * desc).sum(axis=1, keepdims=True))
    return (desc / np.maximum(norm, 1e-6)).astype(np.float32)


def argmax_offsets(costs: np.ndarray, spec: SearchSpec) -> np.ndarray:
    """(1, D, h, w) costs -> (1, 2, h, w) offset (dx, dy) of the best match per pixel."""
    offsets = np.array(spec.offsets(), dtype=np.float32)  # (D, 2) as (dy, dx)
    best = costs[0].argmax(axis=0)
    return np.stack([offsets[best, 1], offsets[best, 0]])[None]


@dataclass
class GhostingResult:
    warped: np.ndarray
    argmax_warping: np.ndarray
    argmax_sampling: np.ndarray
    duplicate_ncc: float
    reference_ncc: float
    zero_offset_warping: float  # share of visible pixels whose best match is d = 0
    zero_offset_sampling: float

    @property
    def duplicated(self) -> bool:
        return self.duplicate_ncc > NCC_DUPLICATE and self.reference_ncc < NCC_DUPLICATE


def run_ghosting_demo(scene: GhostingScene | None = None) -> GhostingResult:
    scene = scene or ghosting_scene()
    s = scene.sample
    spec = SearchSpec(RADIUS)
    f1 = Tensor(patch_descriptors(s.im1))
    f2 = Tensor(patch_descriptors(s.im2))
    flow = Tensor(s.gt_flow)
    warped = warp(Tensor(s.im2), flow).data

    arg_w = argmax_offsets(cost_volume_warping(f1, f2, flow, spec).costs.data, spec)
    arg_s = argmax_offsets(cost_volume_sampling(f1, f2, flow, spec).costs.data, spec)
    visible = s.gt_occ[0, 0] == 0

    def zero_share(arg):
        return float(np.mean((np.abs(arg[0]).sum(axis=0) == 0)[visible]))

    b1, b2 = scene.frame1_box(), scene.frame2_box()
    return GhostingResult(
        warped=warped,
        argmax_warping=arg_w,
        argmax_sampling=arg_s,
        duplicate_ncc=ncc(warped[0][:, b1[0], b1[1]], warped[0][:, b2[0], b2[1]]),
        reference_ncc=ncc(s.im1[0][:, b1[0], b1[1]], s.im1[0][:, b2[0], b2[1]]),
        zero_offset_warping=zero_share(arg_w),
        zero_offset_sampling=zero_share(arg_s),
    )


def write_ghosting_images(result: GhostingResult, out_dir, ext: str = ".ppm") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"warped_target{ext}", out / f"argmax_warping{ext}", out / f"argmax_sampling{ext}"]
    write_image(paths[0], np.clip(result.warped, 0, 1))
    write_image(paths[1], flow_to_color(result.argmax_warping, max_mag=RADIUS * np.sqrt(2)))
    write_image(paths[2], flow_to_color(result.argmax_sampling, max_mag=RADIUS * np.sqrt(2)))
    return paths
