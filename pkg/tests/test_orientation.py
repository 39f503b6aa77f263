import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentpair.core import BinaryMask, GrayImage, OrientationField, QualityMap, angular_distance
from latentpair.errors import DegenerateFitError, InputError
from latentpair.orientation import (coherence_quality_map, estimate_orientation_field, fomfe_eval, fomfe_fit,
                                    load_orientation_field, quality_mask, save_orientation_field)

from conftest import stripes
from oracles import coherence_loops

def test_coherence_matches_loop_oracle(rng):
    a = rng.uniform(0, 255, (32, 32))
    assert np.abs(coherence_quality_map(GrayImage(a)).values - coherence_loops(a)).max() <= 1e-10


def test_coherence_of_parallel_stripes():
    q = coherence_quality_map(GrayImage(stripes(64, 64, 0.7)))
    assert q.values[12:-12, 12:-12].min() >= 0.99


def test_coherence_of_isotropic_texture():
    # Sum of two orthogonal stripe patterns with whole periods in the window: Gxx = Gyy, Gxy = 0.
    yy, xx = np.mgrid[0:68, 0:68].astype(float)
    a = 127.5 + 60 * np.cos(2 * np.pi * xx / 17) + 60 * np.cos(2 * np.pi * yy / 17)
    q = coherence_quality_map(GrayImage(a)).values
    assert q[25:43, 25:43].max() < 1e-9


def test_coherence_offset_invariance_and_range(rng):
    a = rng.uniform(0, 200, (40, 40))
    q1 = coherence_quality_map(GrayImage(a)).values
    q2 = coherence_quality_map(GrayImage(a + 50)).values
    np.testing.assert_allclose(q1, q2, atol=1e-12)
    assert q1.min() >= 0 and q1.max() <= 1
    assert np.all(coherence_quality_map(GrayImage(np.full((20, 20), 9.0))).values == 0)
    with pytest.raises(InputError):
        coherence_quality_map(GrayImage(np.zeros((10, 40))))


def test_quality_mask_threshold():
    assert quality_mask(QualityMap(np.ones((3, 3)))).data.all()
    assert not quality_mask(QualityMap(np.zeros((3, 3)))).data.any()
    m = quality_mask(QualityMap(np.array([[0.89, 0.9, 0.91]]))).data
    assert m.tolist() == [[False, True, True]]
    with pytest.raises(InputError):
        quality_mask(QualityMap(np.ones((2, 2))), 1.5)


@pytest.mark.parametrize("theta", [math.pi / 2, math.pi / 4, 0.0, 2.0])
def test_orientation_of_stripes(theta):
    of = estimate_orientation_field(GrayImage(stripes(64, 64, theta)))
    inner = (slice(12, 52), slice(12, 52))
    assert of.valid[inner].all()
    assert angular_distance(of.angles[inner], theta).max() < 0.05


def test_uniform_image_is_invalid_and_roi_respected():
    assert not estimate_orientation_field(GrayImage(np.full((30, 30), 80.0))).valid.any()
    roi = np.zeros((40, 40), bool)
    roi[10:20, 5:30] = True
    of = estimate_orientation_field(GrayImage(stripes(40, 40, 1.0)), BinaryMask(roi))
    assert np.array_equal(of.valid, roi)


def smooth_field(w, h):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return wrap_angles(0.8 + 0.6 * np.sin(2 * np.pi * xx / w) + 0.4 * np.cos(2 * np.pi * yy / h))


def wrap_angles(a):
    return np.mod(a, math.pi)


def test_fomfe_constant_field_exact():
    of = OrientationField.constant(48, 40, math.pi / 3)
    m = fomfe_fit(of, 4)
    assert m.coeff_cos.size == 81 and m.coeff_sin.size == 81
    ev = fomfe_eval(m)
    assert angular_distance(ev.angles, math.pi / 3).max() < 1e-8


def test_fomfe_noise_residual_matches_least_squares(rng):
    w = h = 40
    theta = np.mod(math.pi / 3 + rng.uniform(-0.2, 0.2, (h, w)), math.pi)
    of = OrientationField(theta, np.ones((h, w), bool))
    m = fomfe_fit(of, 4)
    c, s = np.cos(2 * theta).ravel(), np.sin(2 * theta).ravel()
    noise_var = np.mean((c - c.mean()) ** 2 + (s - s.mean()) ** 2)
    assert m.residual < noise_var
    # independent least-squares oracle on the same basis
    yy, xx = np.mgrid[0:h, 0:w]
    cols = []
    for fy in _basis(yy.ravel(), h, 4).T:
        for fx in _basis(xx.ravel(), w, 4).T:
            cols.append(fy * fx)
    A = np.stack(cols, 1)
    rc = A @ np.linalg.lstsq(A, c, rcond=None)[0] - c
    rs = A @ np.linalg.lstsq(A, s, rcond=None)[0] - s
    assert m.residual == pytest.approx(np.mean(rc ** 2 + rs ** 2), rel=1e-6)


def _basis(t, period, k):
    w = 2 * math.pi / period
    out = [np.ones_like(t, float)]
    for m in range(1, k + 1):
        out += [np.cos(m * w * t), np.sin(m * w * t)]
    return np.stack(out, 1)


def test_fomfe_residual_nested_orders(rng):
    of = OrientationField(np.mod(smooth_field(40, 36) + rng.normal(0, 0.15, (36, 40)), math.pi),
                          rng.random((36, 40)) > 0.2)
    res = [fomfe_fit(of, k).residual for k in (1, 2, 3, 4)]
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))


def test_fomfe_inpaints_hole():
    truth = smooth_field(64, 64)
    valid = np.ones((64, 64), bool)
    valid[24:40, 24:40] = False
    m = fomfe_fit(OrientationField(truth, valid), 4)
    hole = BinaryMask(~valid)
    ev = fomfe_eval(m, hole)
    assert ev.valid.sum() == 256
    assert angular_distance(ev.angles[~valid], truth[~valid]).max() < 0.1


def test_fomfe_empty_region_and_degenerate_input():
    m = fomfe_fit(OrientationField.constant(20, 20, 1.0), 1)
    assert not fomfe_eval(m, BinaryMask.full(20, 20, False)).valid.any()
    few = np.zeros((20, 20), bool)
    few[0, :5] = True
    with pytest.raises(DegenerateFitError):
        fomfe_fit(OrientationField(np.zeros((20, 20)), few), 2)
    line = np.zeros((30, 30), bool)
    line[:, 3] = True  # one column: the x basis collapses
    with pytest.raises(DegenerateFitError):
        fomfe_fit(OrientationField(np.zeros((30, 30)), line), 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_fomfe_eval_range(seed, k):
    r = np.random.default_rng(seed)
    of = OrientationField(r.uniform(0, math.pi, (24, 24)), np.ones((24, 24), bool))
    ev = fomfe_eval(fomfe_fit(of, k))
    assert ev.valid.all() and ev.angles.min() >= 0 and ev.angles.max() < math.pi


def test_orientation_field_serialisation(tmp_path, rng):
    of = OrientationField(rng.uniform(0, math.pi, (7, 9)), rng.random((7, 9)) > 0.4)
    save_orientation_field(of, tmp_path / "of.f32")
    assert (tmp_path / "of.f32").stat().st_size == 7 * 9 * 4
    back = load_orientation_field(tmp_path / "of.f32")
    assert np.array_equal(back.valid, of.valid)
    np.testing.assert_allclose(back.angles, of.angles, atol=1e-6)
