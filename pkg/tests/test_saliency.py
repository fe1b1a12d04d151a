import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskfusion.errors import UsageError
from taskfusion.saliency import pseudo_fusion, quantize, vsm, weights_to_fusion

unit = st.floats(0.0, 1.0, allow_nan=False)
images = arrays(np.float64, (6, 5), elements=unit)


def test_worked_2x2_example_matches_histogram_sums():
    img = np.array([[0.0, 0.0], [0.0, 1.0]])
    # levels {0, 255}: S(0) = 1 * 255, S(255) = 3 * 255
    np.testing.assert_array_equal(vsm(img), np.array([[255.0, 255.0], [255.0, 765.0]]) / 765.0)


def test_constant_image_falls_back_to_half():
    np.testing.assert_array_equal(vsm(np.full((4, 3), 0.3)), np.full((4, 3), 0.5))


def test_checker_and_negative_share_saliency():
    checker = (np.indices((6, 6)).sum(axis=0) % 2).astype(float)
    np.testing.assert_array_equal(vsm(checker), vsm(1.0 - checker))


def test_saliency_matches_brute_force(rng):
    img = rng.random((5, 7))
    q = quantize(img, 16).ravel()
    raw = np.array([np.abs(q[i] - q).sum() for i in range(q.size)], dtype=float)
    np.testing.assert_allclose(vsm(img, bins=16).ravel(), raw / raw.max(), rtol=0, atol=1e-15)


def test_quantize_puts_one_in_last_bin():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 0.999, 1.0]), 4), [0, 2, 3, 3])


def test_empty_and_bad_bins_rejected():
    with pytest.raises(UsageError):
        vsm(np.zeros((0, 3)))
    with pytest.raises(UsageError):
        vsm(np.zeros((2, 2)), bins=1)
    with pytest.raises(UsageError):
        pseudo_fusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_zero_saliency_pair_gets_equal_weights():
    pf = weights_to_fusion(np.ones(3), np.zeros(3), np.zeros(3), np.zeros(3))
    np.testing.assert_array_equal(pf.m1, 0.5)
    np.testing.assert_array_equal(pf.u_m, 0.5)


@given(images, images)
def test_weights_partition_unity(x, y):
    pf = pseudo_fusion(x, y)
    assert np.max(np.abs(pf.m1 + pf.m2 - 1.0)) <= 1e-12
    assert pf.m1.min() >= 0.0 and pf.m2.min() >= 0.0


@given(images, images)
def test_pseudo_fusion_stays_between_sources(x, y):
    pf = pseudo_fusion(x, y)
    assert np.all(pf.u_m >= np.minimum(x, y) - 1e-15)
    assert np.all(pf.u_m <= np.maximum(x, y) + 1e-15)


@given(images)
def test_saliency_range(img):
    s = vsm(img)
    assert s.min() >= 0.0 and s.max() <= 1.0
    assert s.max() == 1.0 or np.all(s == 0.5)
