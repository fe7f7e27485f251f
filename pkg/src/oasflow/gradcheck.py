"""Central finite-difference verification of every registered adjoint.

Checks run in float64.  Each op output is reduced with a fixed random
projection, ``loss = sum(out * R)``, so one scalar exercises every output
element.  Inputs are drawn away from the non-smooth points of leaky ReLU
(zero) and of bilinear sampling (integer coordinates).  On top of that, every
perturbed evaluation runs under a :class:`RegimeProbe`; an element whose
``+eps`` or ``-eps`` pass lands on a different smooth piece than the
unperturbed pass is skipped and counted, since a central difference across a
kink measures neither one-sided derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .correlation import CostVolume, SearchSpec, cost_volume_sampling, cost_volume_warping
from .network import NetConfig, OASNet
from .occlusion import OAParams, occlusion_aware_volume
from . import ops
from .tensor import RegimeProbe, Tape, Tensor, backward

OP_THRESHOLD = 1e-3
MODEL_THRESHOLD = 1e-2
GRAD_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    threshold: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)``, zero where both magnitudes are at or below ``floor``."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.where(scale > 0, scale, 1)
    return np.where(scale > floor, err, 0.0)


def _unwrap(out):
    return out.costs if isinstance(out, CostVolume) else out


def _probed(value_fn: Callable[[], float]) -> tuple[float, bytes]:
    with RegimeProbe() as probe:
        value = value_fn()
    return value, probe.signature()


def _central_differences(flat: np.ndarray, value_fn: Callable[[], float], eps: float):
    """Perturb ``flat`` in place element by element; return (numeric grad, smooth mask)."""
    _, base = _probed(value_fn)
    numeric = np.zeros(flat.size)
    smooth = np.ones(flat.size, dtype=bool)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi, sig_hi = _probed(value_fn)
        flat[i] = orig - eps
        lo, sig_lo = _probed(value_fn)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * eps)
        smooth[i] = sig_hi == base == sig_lo
    return numeric, smooth


def check_function(
    name: str,
    fn: Callable[..., Tensor],
    arrays: dict[str, np.ndarray],
    wrt: Iterable[str] | None = None,
    eps: float = 1e-6,
    threshold: float = OP_THRESHOLD,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of ``fn(**tensors)`` against central differences."""
    wrt = list(arrays) if wrt is None else list(wrt)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    def run(record_grads: bool):
        tensors = {k: Tensor(v, requires_grad=record_grads and k in wrt) for k, v in arrays.items()}
        return tensors, _unwrap(fn(**tensors))

    _, probe = run(False)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    tensors = {k: Tensor(v, requires_grad=k in wrt) for k, v in arrays.items()}
    with Tape() as tape:
        out = _unwrap(fn(**tensors))
        loss = ops.sum_all(ops.mul(out, Tensor(proj)))
    backward(tape, loss)

    worst = 0.0
    checked = skipped = 0
    for key in wrt:
        analytic = tensors[key].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[key])
        flat = arrays[key].reshape(-1)
        numeric, smooth = _central_differences(
            flat, lambda: float(np.sum(run(False)[1].data * proj)), eps)
        err = relative_errors(analytic.reshape(-1)[smooth], numeric[smooth])
        worst = max(worst, float(err.max(initial=0.0)))
        checked += int(smooth.sum())
        skipped += int((~smooth).sum())
    return GradCheckResult(name, worst, threshold, checked, skipped)


def _frac_coords(rng, shape, lo: float, hi: float) -> np.ndarray:
    """Random coordinates whose fractional parts lie in [0.2, 0.8]."""
    return rng.integers(int(lo), int(hi), size=shape) + rng.uniform(0.2, 0.8, size=shape)


def _away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def op_checks(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def add(name, fn, arrays, wrt=None):
        results.append(check_function(name, fn, arrays, wrt, seed=seed))

    add("conv2d[s1,p1]", lambda x, w, b: ops.conv2d(x, w, b, 1, 1),
        {"x": rng.standard_normal((2, 3, 5, 5)), "w": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal(4)})
    add("conv2d[s2,p1]", lambda x, w, b: ops.conv2d(x, w, b, 2, 1),
        {"x": rng.standard_normal((1, 2, 6, 7)), "w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)})
    add("leaky_relu", lambda x: ops.leaky_relu(x, 0.1), {"x": _away_from_zero(rng, (2, 3, 4, 4))})
    add("sigmoid", ops.sigmoid, {"x": 3 * rng.standard_normal((1, 2, 4, 4))})
    add("upsample_bilinear_2x", lambda x: ops.upsample_bilinear_2x(x, 2.0), {"x": rng.standard_normal((2, 2, 3, 4))})
    add("bilinear_sample", ops.bilinear_sample,
        {"feature": rng.standard_normal((2, 3, 5, 6)),
         "coords_x": _frac_coords(rng, (2, 1, 4, 3), -2, 7),
         "coords_y": _frac_coords(rng, (2, 1, 4, 3), -2, 6)})
    add("concat_channels", lambda a, b: ops.concat_channels([a, b]),
        {"a": rng.standard_normal((1, 2, 3, 3)), "b": rng.standard_normal((1, 3, 3, 3))})
    add("slice_channels", lambda x: ops.slice_channels(x, 1, 3), {"x": rng.standard_normal((1, 4, 3, 3))})
    add("mul[broadcast]", ops.mul, {"a": rng.standard_normal((1, 1, 3, 4)), "b": rng.standard_normal((1, 5, 3, 4))})
    add("add", ops.add, {"a": rng.standard_normal((1, 2, 3, 3)), "b": rng.standard_normal((1, 2, 3, 3))})
    add("one_minus", ops.one_minus, {"x": rng.standard_normal((1, 1, 3, 3))})
    target = rng.standard_normal((2, 2, 3, 3))
    add("l2_norm_sum", lambda pred: ops.l2_norm_sum(pred, target), {"pred": rng.standard_normal((2, 2, 3, 3))})

    flow_shape = (1, 2, 5, 5)
    flow = np.sign(rng.standard_normal(flow_shape)) * _frac_coords(rng, flow_shape, 0, 2)
    feats = {"f1": rng.standard_normal((1, 3, 5, 5)), "f2": rng.standard_normal((1, 3, 5, 5)), "flow": flow}
    add("cost_volume_warping[r=1]", lambda f1, f2, flow: cost_volume_warping(f1, f2, flow, SearchSpec(1)), feats)
    add("cost_volume_sampling[r=2]", lambda f1, f2, flow: cost_volume_sampling(f1, f2, flow, SearchSpec(2)), feats)

    d = 9
    add("occlusion_aware_volume",
        lambda c, occ, w1, b1, w2, b2: occlusion_aware_volume(
            CostVolume(c, SearchSpec(1)), occ, OAParams(w1, b1, w2, b2)),
        {"c": rng.standard_normal((1, d, 4, 4)), "occ": rng.uniform(0.1, 0.9, (1, 1, 4, 4)),
         "w1": 0.3 * rng.standard_normal((d, d, 3, 3)), "b1": rng.standard_normal(d),
         "w2": 0.3 * rng.standard_normal((d, d, 3, 3)), "b2": rng.standard_normal(d)})
    return results


def reduced_config(**overrides) -> NetConfig:
    """Three-level encoder, two estimation levels, for 8x8 inputs."""
    base = dict(encoder_channels=(4, 6, 8), decoder_channels=(8, 6), radius=1, finest_level=2)
    base.update(overrides)
    return NetConfig(**base)


def model_check(seed: int = 0, cfg: NetConfig | None = None, eps: float = 1e-3,
                threshold: float = MODEL_THRESHOLD) -> GradCheckResult:
    """Finite differences of the full multi-scale training loss w.r.t. every parameter element."""
    from .training.loss import LossConfig, multiscale_l2_loss

    cfg = cfg or reduced_config()
    rng = np.random.default_rng(seed)
    net = OASNet(cfg, seed=seed, dtype=np.float64)
    h = w = cfg.multiple
    im1 = Tensor(rng.random((1, 3, h, w)))
    im2 = Tensor(rng.random((1, 3, h, w)))
    gt = 2.0 * rng.standard_normal((1, 2, h, w))
    loss_cfg = LossConfig(level_weights={lvl: 0.1 * lvl for lvl in cfg.levels}, weight_decay=4e-4)

    def loss_value() -> float:
        est = net.estimate_flow(im1, im2)
        return float(multiscale_l2_loss(est.levels, gt, loss_cfg, net.params).data)

    net.params.zero_grads()
    with Tape() as tape:
        est = net.estimate_flow(im1, im2)
        loss = multiscale_l2_loss(est.levels, gt, loss_cfg, net.params)
    backward(tape, loss)

    worst = 0.0
    checked = skipped = 0
    for p in net.params:
        numeric, smooth = _central_differences(p.data.reshape(-1), loss_value, eps)
        err = relative_errors(p.grad.reshape(-1)[smooth], numeric[smooth])
        worst = max(worst, float(err.max(initial=0.0)))
        checked += int(smooth.sum())
        skipped += int((~smooth).sum())
    return GradCheckResult("end-to-end loss", worst, threshold, checked, skipped)


def run_suite(seed: int = 0) -> list[GradCheckResult]:
    return op_checks(seed) + [model_check(seed)]
