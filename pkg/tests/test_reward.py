import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmanip.reward import (GaussianParams, RewardMap, baseline_reward, gaussian_kernel, primitive_weight,
                              smooth, task_progress_reward, tpg_reward)
from gridmanip.workspace import ImagePose, Primitive

from .oracles import direct_convolution, kernel_value


@pytest.mark.parametrize("prim, w", [(Primitive.PUSH, 0.2), (Primitive.PICK, 1.0), (Primitive.PLACE, 1.0)])
def test_primitive_weights(prim, w):
    assert primitive_weight(prim) == w


def test_tp_gate():
    m = task_progress_reward(False, 0.9, Primitive.PICK, ImagePose(2, 3), 8)
    assert not m.values.any()


def test_tp_push_half():
    m = task_progress_reward(True, 0.5, Primitive.PUSH, ImagePose(2, 3), 8)
    assert m.values[3, 2] == pytest.approx(0.1)
    assert np.count_nonzero(m.values) == 1
    assert m.at_action == pytest.approx(0.1)


def test_tp_place_unit():
    m = task_progress_reward(True, 1.0, Primitive.PLACE, ImagePose(0, 0), 4)
    assert m.values[0, 0] == 1.0


@pytest.mark.parametrize("p", [-0.1, 1.1, float("nan")])
def test_tp_rejects_bad_progress(p):
    with pytest.raises(ValueError):
        task_progress_reward(True, p, Primitive.PICK, ImagePose(0, 0), 4)


def test_gaussian_params_invariants():
    g = GaussianParams(1.0)
    assert g.sigma_x == 2.0 and g.radius == 6
    with pytest.raises(ValueError):
        GaussianParams(0.0)
    with pytest.raises(ValueError):
        GaussianParams(1.0, kernel_radius=5)
    assert GaussianParams(1.0, kernel_radius=8).radius == 8


def test_kernel_center():
    k = gaussian_kernel(GaussianParams(1.0))
    assert k[6, 6] == pytest.approx(1 / (2 * math.pi * 2 * 1), rel=1e-15)


def test_kernel_along_x_axis():
    k = gaussian_kernel(GaussianParams(1.0, 0.0))
    assert k[6, 8] == k[6, 4]
    # long axis is x at theta = 0
    assert k[6, 8] > k[8, 6]


@pytest.mark.parametrize("theta", [0.0, 0.3, 1.0, math.pi / 2, 2.5])
def test_kernel_matches_closed_form(theta):
    # the kernel angle is snapped to multiples of pi / 2**30, worth ~1e-8 relative in the far tail
    k = gaussian_kernel(GaussianParams(1.0, theta))
    r = 6
    for v in range(-r, r + 1):
        for u in range(-r, r + 1):
            assert k[v + r, u + r] == pytest.approx(kernel_value(u, v, 2.0, 1.0, theta), rel=1e-7, abs=1e-300)


def test_kernel_quarter_turn_is_transpose():
    k0 = gaussian_kernel(GaussianParams(1.0, 0.0))
    k90 = gaussian_kernel(GaussianParams(1.0, math.pi / 2))
    assert np.allclose(k90, k0.T, rtol=1e-12, atol=0)


@given(st.floats(-20, 20), st.floats(0.3, 2.0))
def test_kernel_point_symmetry_and_half_turn(theta, sy):
    k = gaussian_kernel(GaussianParams(sy, theta))
    assert np.array_equal(k, k[::-1, ::-1])
    assert np.array_equal(k, gaussian_kernel(GaussianParams(sy, theta + math.pi)))


def test_smooth_zero_map():
    m = RewardMap(np.zeros((8, 8)), (0, 0))
    assert not smooth(m, GaussianParams(1.0)).values.any()


def test_smooth_impulse_is_kernel():
    n = 13
    vals = np.zeros((n, n))
    vals[6, 6] = 1.0
    g = GaussianParams(1.0, 0.4)
    out = smooth(RewardMap(vals, (6, 6)), g).values
    assert np.allclose(out, gaussian_kernel(g), rtol=1e-12, atol=0)


def test_smooth_impulse_at_3_3_against_loops():
    vals = np.zeros((10, 10))
    vals[3, 3] = 0.5
    g = GaussianParams(1.0)
    k = gaussian_kernel(g)
    out = smooth(RewardMap(vals, (3, 3)), g).values
    assert np.allclose(out, direct_convolution(vals, k), rtol=1e-6, atol=1e-300)
    # 0.5 x kernel centered at (3, 3), cut by the border
    for y in range(10):
        for x in range(10):
            u, v = x - 3, y - 3
            expect = 0.5 * k[v + 6, u + 6] if abs(u) <= 6 and abs(v) <= 6 else 0.0
            assert out[y, x] == pytest.approx(expect, rel=1e-12, abs=1e-300)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 16), st.floats(0, 2 * math.pi), st.floats(0.5, 2.0))
def test_smooth_matches_direct_convolution(seed, n, theta, sy):
    rng = np.random.default_rng(seed)
    vals = rng.random((n, n)) * (rng.random((n, n)) < 0.3)
    g = GaussianParams(sy, theta)
    out = smooth(RewardMap(vals, (0, 0)), g).values
    ref = direct_convolution(vals, gaussian_kernel(g))
    assert np.allclose(out, ref, rtol=1e-6, atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0, 10), st.floats(-10, 10))
@settings(max_examples=30, deadline=None)
def test_smooth_linear_and_half_turn_invariant(seed, c, theta):
    rng = np.random.default_rng(seed)
    vals = rng.random((9, 9))
    g = GaussianParams(1.0, theta)
    a = smooth(RewardMap(vals, (0, 0)), g).values
    assert np.allclose(smooth(RewardMap(c * vals, (0, 0)), g).values, c * a, rtol=1e-12, atol=1e-300)
    assert np.array_equal(a, smooth(RewardMap(vals, (0, 0)), g.rotated(theta + math.pi)).values)


def test_tpg_gate():
    assert not tpg_reward(False, 0.7, Primitive.PICK, ImagePose(3, 3, 0.2), 9).values.any()


def test_tpg_action_pixel_keeps_peak():
    m = tpg_reward(True, 1.0, Primitive.PICK, ImagePose(4, 4, 0.0), 9)
    assert m.at_action == 1.0
    assert m.values.max() == 1.0


def test_tpg_nine_by_nine_cell_by_cell():
    pose = ImagePose(4, 4, 0.0)
    m = tpg_reward(True, 0.6, Primitive.PICK, pose, 9).values
    impulse = np.zeros((9, 9))
    impulse[4, 4] = 0.6
    smoothed = direct_convolution(impulse, gaussian_kernel(GaussianParams(1.0, 0.0)))
    for y in range(9):
        for x in range(9):
            assert m[y, x] == pytest.approx(max(impulse[y, x], smoothed[y, x]), rel=1e-6, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.booleans(), st.floats(0, 1), st.sampled_from(list(Primitive)), st.integers(0, 11),
       st.integers(0, 11), st.floats(0, 2 * math.pi), st.floats(0.5, 2.0))
def test_tpg_is_pointwise_max(x, p, prim, px, py, theta, sy):
    size = 12
    pose = ImagePose(px, py, theta)
    g = GaussianParams(sy)
    sharp = task_progress_reward(x, p, prim, pose, size)
    soft = smooth(sharp, g.rotated(theta))
    fused = tpg_reward(x, p, prim, pose, size, g).values
    assert np.array_equal(fused, np.maximum(sharp.values, soft.values))
    assert (fused >= sharp.values).all() and (fused >= soft.values).all()
    assert (fused >= 0).all()
    assert fused.max() <= primitive_weight(prim)
    if not x:
        assert not fused.any()


def test_baseline_reward():
    assert baseline_reward(True) == 1.0
    assert baseline_reward(False) == 0.0
