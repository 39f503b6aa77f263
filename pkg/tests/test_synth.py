import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentpair.core import GrayImage, angular_distance
from latentpair.errors import InputError
from latentpair.orientation import estimate_orientation_field
from latentpair.synth import (DistortionParams, DatasetManifest, build_dataset, composite_noise, displacement,
                              distort_points, ellipse_distance, generate_synthetic_rolled, make_noise_bank,
                              plastic_distort, sample_distortion_params, synthesize_latent, transition,
                              undistort_points)


def test_param_ranges_and_coverage():
    rng = np.random.default_rng(1)
    ps = [sample_distortion_params(rng, 400) for _ in range(10000)]
    b = 200.0
    cols = {
        "l": ([p.l for p in ps], 0.5, 2.0),
        "theta": ([p.theta for p in ps], 0.0, 5.0),
        "ax": ([p.a[0] for p in ps], -15.0, 15.0),
        "ay": ([p.a[1] for p in ps], -15.0, 15.0),
        "sx": ([p.s_x for p in ps], 0.2 * b, 0.6 * b),
        "sy": ([p.s_y for p in ps], 0.2 * b, 1.2 * b),
    }
    for name, (vals, lo, hi) in cols.items():
        span = hi - lo
        assert lo <= min(vals) <= lo + 0.02 * span, name
        assert hi - 0.02 * span <= max(vals) <= hi, name
    assert all(40 <= p.s_x <= 120 for p in ps)
    for p in ps[:200]:
        assert 100 <= p.o_r[0] <= 300 and 100 <= p.o_e[1] <= 300
    a = sample_distortion_params(np.random.default_rng(9), 256)
    assert a == sample_distortion_params(np.random.default_rng(9), 256)


P = DistortionParams(1.0, 3.0, (4.0, -2.0), (50.0, 60.0), (40.0, 45.0), 20.0, 30.0)


def test_ellipse_distance_examples():
    assert ellipse_distance((40.0, 45.0), P) == -1
    assert ellipse_distance((60.0, 45.0), P) == pytest.approx(0, abs=1e-15)
    assert ellipse_distance((40.0, 15.0), P) == pytest.approx(0, abs=1e-15)
    assert ellipse_distance((80.0, 45.0), P) == pytest.approx(1, abs=1e-15)


@pytest.mark.parametrize("l", [0.5, 1.0, 1.7, 2.0])
def test_transition_knots(l):
    assert transition(-0.5, l) == 0
    assert transition(l / 2, l) == 0.5
    assert transition(l, l) == 1
    eps = 1e-13
    assert abs(transition(eps, l) - transition(-eps, l)) < 1e-12
    assert abs(transition(l + eps, l) - transition(l - eps, l)) < 1e-12
    f = np.linspace(-1, l + 1, 1000)
    g = transition(f, l)
    assert np.all(np.diff(g) >= 0)
    assert np.max(np.abs(np.diff(g))) < 2 * math.pi / 2 * (f[1] - f[0]) / l + 1e-12


def test_displacement_examples(rng):
    v = rng.uniform(0, 100, (50, 2))
    zero = DistortionParams(1.0, 0.0, (0.0, 0.0), (50.0, 50.0), (50.0, 50.0), 10, 10)
    assert np.all(displacement(v, zero) == 0)
    shift = DistortionParams(1.0, 0.0, (5.0, -3.0), (50.0, 50.0), (50.0, 50.0), 10, 10)
    np.testing.assert_allclose(displacement(v, shift), np.tile([5.0, -3.0], (50, 1)), atol=1e-12)
    rot = DistortionParams(1.0, 4.0, (0.0, 0.0), (30.0, 20.0), (50.0, 50.0), 10, 10)
    np.testing.assert_allclose(displacement((30.0, 20.0), rot), [0, 0], atol=1e-12)
    # R_theta = [[c, s], [-s, c]] applied to (v - o_r)
    th = math.radians(4.0)
    x, y = 40.0 - 30.0, 25.0 - 20.0
    expect = (math.cos(th) * x + math.sin(th) * y - x, -math.sin(th) * x + math.cos(th) * y - y)
    np.testing.assert_allclose(displacement((40.0, 25.0), rot), expect, atol=1e-12)


def test_zero_distortion_is_identity(rng):
    img = GrayImage(rng.uniform(0, 255, (64, 80)))
    out = plastic_distort(img, DistortionParams(1.2, 0.0, (0.0, 0.0), (30.0, 30.0), (40.0, 32.0), 15, 20))
    assert np.array_equal(out.data, img.data)


def test_rigid_interior(rng):
    img = GrayImage(rng.uniform(0, 255, (100, 100)))
    p = DistortionParams(1.0, 5.0, (15.0, -15.0), (50.0, 50.0), (50.0, 50.0), 30, 35)
    out = plastic_distort(img, p).data
    yy, xx = np.mgrid[0:100, 0:100].astype(float)
    inside = ellipse_distance(np.stack([xx, yy], -1), p) < 0
    assert np.array_equal(out[inside], img.data[inside])
    assert not np.array_equal(out[~inside], img.data[~inside])


def test_forward_inverse_round_trip():
    p = DistortionParams(1.25, 2.5, (0.0, 0.0), (128.0, 128.0), (128.0, 128.0), 0.4 * 128, 0.7 * 128)
    yy, xx = np.mgrid[0:256:4, 0:256:4].astype(float)
    v = np.stack([xx, yy], -1)
    back = undistort_points(distort_points(v, p), p)
    assert np.abs(back - v).max() < 0.5
    q = DistortionParams(1.25, 2.5, (7.5, -7.5), (128.0, 128.0), (128.0, 128.0), 0.4 * 128, 0.7 * 128)
    assert np.abs(undistort_points(distort_points(v, q), q) - v).max() < 0.5


def test_composite_noise(rng):
    fp = GrayImage(rng.uniform(0, 255, (20, 30)))
    flat = GrayImage(np.full((20, 30), 128.0))
    np.testing.assert_allclose(composite_noise(fp, flat, 0.2).data, np.clip(0.8 * fp.data + 25.6, 0, 255))
    for a in (0.2, 0.5, 0.8):
        np.testing.assert_allclose(composite_noise(fp, fp, a).data, fp.data, atol=1e-12)
    noise = GrayImage(rng.uniform(0, 255, (20, 30)))
    out = composite_noise(fp, noise, 0.37).data
    for y in range(20):
        for x in range(30):
            ref = min(255.0, max(0.0, 0.63 * fp.data[y, x] + 0.37 * noise.data[y, x]))
            assert abs(out[y, x] - ref) <= 0.5
    with pytest.raises(InputError):
        composite_noise(fp, noise, 0.9)
    small = GrayImage(np.full((10, 15), 128.0))
    assert composite_noise(fp, small, 0.5).shape == fp.shape


def test_synthetic_rolled():
    a, of = generate_synthetic_rolled(7)
    b, _ = generate_synthetic_rolled(7)
    assert np.array_equal(a.data, b.data)
    est = estimate_orientation_field(a)
    from scipy import ndimage
    interior = ndimage.binary_erosion(of.valid, iterations=20)
    err = angular_distance(est.angles[interior], of.angles[interior])
    assert np.median(err) < 0.15
    c, _ = generate_synthetic_rolled(8)
    assert np.mean(np.abs(a.data - c.data)) > 20
    with pytest.raises(InputError):
        generate_synthetic_rolled(1, 128, 256)


def test_latent_synthesis_deterministic():
    rolled, _ = generate_synthetic_rolled(3)
    bank = make_noise_bank(np.random.default_rng(0), 2, 256, 256)
    a = synthesize_latent(rolled, bank, np.random.default_rng(5))
    b = synthesize_latent(rolled, bank, np.random.default_rng(5))
    assert np.array_equal(a.data, b.data) and a.data.min() >= 0 and a.data.max() <= 255


def tiny_fingers(n, rng):
    return [(GrayImage(rng.uniform(0, 255, (32, 32))), GrayImage(rng.uniform(0, 255, (32, 32)))) for _ in range(n)]


def test_build_dataset_protocol(tmp_path):
    rng = np.random.default_rng(0)
    fingers = tiny_fingers(100, rng)
    bank = make_noise_bank(rng, 2, 32, 32)
    m = build_dataset(fingers, bank, np.random.default_rng(42), tmp_path / "a")
    labels = [e.pair_label for e in m.entries]
    assert labels.count("genuine") == 200 and labels.count("impostor") == 200
    assert len(m.split("cnn_train")) == 320 and len(m.split("rbm_train")) == 80
    for e in m.entries:
        same = e.finger_id == e.reference_finger_id
        assert same == (e.pair_label == "genuine")
        assert (tmp_path / "a" / e.latent_path).exists()
    loaded = DatasetManifest.load(tmp_path / "a" / "manifest.json")
    assert loaded.entries == m.entries
    build_dataset(fingers, bank, np.random.default_rng(42), tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    with pytest.raises(InputError):
        build_dataset(fingers[:1], bank, rng, tmp_path / "c")
    with pytest.raises(InputError):
        build_dataset(fingers, [], rng, tmp_path / "d")


def test_genuine_pairs_follow_cross_rule(tmp_path):
    rng = np.random.default_rng(3)
    fingers = tiny_fingers(3, rng)
    m = build_dataset(fingers, make_noise_bank(rng, 1, 32, 32), rng, tmp_path)
    from latentpair.core import load_image
    for e in m.entries:
        if e.pair_label != "genuine":
            continue
        i = int(e.finger_id.split("_")[1])
        other = fingers[i][1] if e.impression_label == "f" else fingers[i][0]
        ref = load_image(m.resolve(e.reference_path)).data
        assert np.array_equal(ref, np.rint(other.data))
