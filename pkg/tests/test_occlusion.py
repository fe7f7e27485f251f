import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oasflow import ops
from oasflow.correlation import CostVolume, SearchSpec
from oasflow.gradcheck import check_function
from oasflow.occlusion import OAParams, occlusion_aware_volume
from oasflow.tensor import Param, ShapeError, Tensor
from oracles import leaky, naive_conv, occlusion_oracle

D = 81


def make_params(rng, d=D, same=False, zero_bias=False, scale=0.05):
    w1 = scale * rng.standard_normal((d, d, 3, 3))
    w2 = w1.copy() if same else scale * rng.standard_normal((d, d, 3, 3))
    b1 = np.zeros(d) if zero_bias else rng.standard_normal(d)
    b2 = b1.copy() if same or zero_bias else rng.standard_normal(d)
    return OAParams(Param("c1.w", w1), Param("c1.b", b1), Param("c2.w", w2), Param("c2.b", b2)), (w1, b1, w2, b2)


def volume(rng, d=D, h=6, w=6):
    c = rng.standard_normal((1, d, h, w)).astype(np.float32)
    return c, CostVolume(Tensor(c), SearchSpec(int((np.sqrt(d) - 1) // 2)))


def test_matches_four_step_oracle(rng):
    c, cv = volume(rng)
    occ = rng.uniform(0.01, 0.99, (1, 1, 6, 6)).astype(np.float32)
    params, raw = make_params(rng)
    out = occlusion_aware_volume(cv, Tensor(occ), params).costs.data
    ref = occlusion_oracle(c.astype(np.float64), occ.astype(np.float64), *(np.float32(a).astype(np.float64) for a in raw))
    assert np.abs(out - ref).max() <= 1e-5


def test_saturated_awareness_uses_only_conv1(rng):
    c, cv = volume(rng)
    params, (w1, b1, _, _) = make_params(rng, zero_bias=True)
    out = occlusion_aware_volume(cv, Tensor(np.ones((1, 1, 6, 6))), params).costs.data
    ref = leaky(naive_conv(c.astype(np.float64), np.float32(w1), b1, 1, 1))
    assert np.abs(out - ref).max() <= 1e-5


def test_equal_weights_ignore_occ(rng):
    c, cv = volume(rng)
    params, (w1, b1, _, _) = make_params(rng, same=True, zero_bias=True)
    ref = leaky(naive_conv(c.astype(np.float64), np.float32(w1), np.float32(b1), 1, 1))
    for _ in range(3):
        occ = Tensor(rng.uniform(0, 1, (1, 1, 6, 6)))
        out = occlusion_aware_volume(cv, occ, params).costs.data
        assert np.abs(out - ref).max() <= 1e-5


@given(st.integers(0, 10_000))
def test_branch_complementarity(seed):
    rng = np.random.default_rng(seed)
    c = Tensor(rng.standard_normal((1, 9, 4, 4)).astype(np.float32))
    occ = Tensor(rng.uniform(0, 1, (1, 1, 4, 4)).astype(np.float32))
    total = ops.add(ops.mul(occ, c), ops.mul(ops.one_minus(occ), c)).data
    assert np.abs(total - c.data).max() <= 1e-6


@given(st.integers(0, 10_000))
def test_occ_invariance_with_equal_weights_property(seed):
    rng = np.random.default_rng(seed)
    c, cv = volume(rng, d=9, h=4, w=4)
    params, _ = make_params(rng, d=9, same=True, scale=0.3)
    a = occlusion_aware_volume(cv, Tensor(rng.uniform(0, 1, (1, 1, 4, 4))), params).costs.data
    b = occlusion_aware_volume(cv, Tensor(rng.uniform(0, 1, (1, 1, 4, 4))), params).costs.data
    assert np.abs(a - b).max() <= 1e-5


def _pre_activation(cv, occ, params):
    occ = Tensor(occ)
    return ops.add(ops.conv2d(ops.mul(occ, cv.costs), params.conv1_w, params.conv1_b, 1, 1),
                   ops.conv2d(ops.mul(ops.one_minus(occ), cv.costs), params.conv2_w, params.conv2_b, 1, 1)).data


@given(st.integers(0, 10_000))
def test_pre_activation_is_affine_in_occ(seed):
    rng = np.random.default_rng(seed)
    _, cv = volume(rng, d=9, h=4, w=4)
    params, _ = make_params(rng, d=9, scale=0.3)
    o1 = rng.uniform(0, 0.5, (1, 1, 4, 4))
    o2 = o1 + rng.uniform(0, 0.5, (1, 1, 4, 4))
    ends = [_pre_activation(cv, o, params).astype(np.float64) for o in (o1, o2)]
    for t in (0.25, 0.5, 0.75):
        mid = _pre_activation(cv, (1 - t) * o1 + t * o2, params)
        assert np.abs(mid - ((1 - t) * ends[0] + t * ends[1])).max() <= 1e-5


def test_occ_gradient_matches_finite_differences(rng):
    d = 9
    w1, w2 = 0.3 * rng.standard_normal((2, d, d, 3, 3))
    result = check_function(
        "oa wrt occ",
        lambda c, occ: occlusion_aware_volume(
            CostVolume(c, SearchSpec(1)), occ,
            OAParams(Param("a", w1, np.float64), Param("b", np.full(d, 0.5), np.float64),
                     Param("c", w2, np.float64), Param("d", np.full(d, -0.5), np.float64))),
        {"c": rng.standard_normal((1, d, 4, 4)), "occ": rng.uniform(0.1, 0.9, (1, 1, 4, 4))},
        wrt=["occ"])
    assert result.max_rel_err <= 1e-3


def test_shape_errors(rng):
    _, cv = volume(rng, d=9, h=4, w=4)
    params, _ = make_params(rng, d=9)
    with pytest.raises(ShapeError):
        occlusion_aware_volume(cv, Tensor(np.zeros((1, 1, 4, 5))), params)
    with pytest.raises(ShapeError):
        occlusion_aware_volume(cv, Tensor(np.zeros((1, 2, 4, 4))), params)
    big, _ = make_params(rng, d=25)
    with pytest.raises(ShapeError):
        occlusion_aware_volume(cv, Tensor(np.zeros((1, 1, 4, 4))), big)
    with pytest.raises(ShapeError):
        OAParams(params.conv1_w, params.conv1_b, big.conv2_w, big.conv2_b)
