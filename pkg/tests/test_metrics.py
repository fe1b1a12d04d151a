import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskfusion.errors import UsageError
from taskfusion.metrics import (
    CSV_COLUMNS,
    entropy,
    fmi,
    gradient_magnitude,
    joint_histogram,
    mutual_information,
    report,
)
from taskfusion.saliency import quantize

unit = st.floats(0.0, 1.0, allow_nan=False)
images = arrays(np.float64, (8, 8), elements=unit)


def two_level():
    a = np.zeros((8, 8))
    a[:, 4:] = 1.0
    return a


def test_two_level_self_information_is_one_bit():
    assert abs(mutual_information(two_level(), two_level()) - 1.0) <= 1e-9


def test_constant_image_has_zero_information(rng):
    assert mutual_information(np.full((8, 8), 0.4), rng.random((8, 8))) == 0.0


def test_independent_noise_has_little_information():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 64, 64))
    assert mutual_information(a, b, bins=16) < 0.05


def test_mi_matches_explicit_double_sum(rng):
    a, b = rng.random((2, 12, 12))
    qa, qb = quantize(a, 8).ravel(), quantize(b, 8).ravel()
    total = 0.0
    n = qa.size
    for i in range(8):
        for j in range(8):
            pij = np.sum((qa == i) & (qb == j)) / n
            if pij > 0:
                total += pij * np.log2(pij / (np.mean(qa == i) * np.mean(qb == j)))
    assert mutual_information(a, b, bins=8) == pytest.approx(total, abs=1e-12)


def test_joint_histogram_sums_to_one(rng):
    assert joint_histogram(*rng.random((2, 5, 5)), bins=7).sum() == pytest.approx(1.0, abs=1e-15)


def test_entropy_of_uniform_levels():
    img = np.repeat(np.arange(4) / 4 + 0.01, 16).reshape(8, 8)
    assert entropy(img, bins=4) == pytest.approx(2.0, abs=1e-12)


@given(images, images)
def test_mi_symmetry(a, b):
    assert abs(mutual_information(a, b) - mutual_information(b, a)) <= 1e-12


@given(images, images)
def test_mi_bounded_by_entropies(a, b):
    mi = mutual_information(a, b, bins=32)
    assert 0.0 <= mi <= min(entropy(a, 32), entropy(b, 32)) + 1e-12


def test_coarser_quantization_never_increases_mi():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.random((32, 32))
        b = np.clip(a + 0.2 * rng.standard_normal((32, 32)), 0, 1)
        # 64 and 16 bins nest, so the coarse map is a function of the fine one
        fine = mutual_information(a, b, bins=64)
        coarse_b = (quantize(b, 16) + 0.5) / 16
        assert mutual_information(a, coarse_b, bins=64) <= fine + 1e-12


def test_fmi_self_is_one(rng):
    u = rng.random((16, 16))
    assert fmi(u, u, u) == 1.0


def test_fmi_constant_fused_image_scores_zero(rng):
    x, y = rng.random((2, 16, 16))
    assert fmi(np.full((16, 16), 0.5), x, y) == 0.0


def test_fmi_all_constant_scores_one():
    c = np.full((6, 6), 0.2)
    assert fmi(c, c, c) == 1.0


def test_fmi_matches_direct_recomputation():
    rng = np.random.default_rng(11)
    u, x, y = rng.random((3, 20, 20))
    gu = gradient_magnitude(u)
    terms = []
    for s in (x, y):
        gs = gradient_magnitude(s)
        qa, qb = quantize(gu, 256).ravel(), quantize(gs, 256).ravel()
        joint = np.zeros((256, 256))
        np.add.at(joint, (qa, qb), 1.0)
        joint /= qa.size
        pa, pb = joint.sum(1), joint.sum(0)

        def h(p):
            p = p[p > 0]
            return -(p * np.log2(p)).sum()

        mi = h(pa) + h(pb) - h(joint.ravel())
        terms.append(2 * mi / (h(pa) + h(pb)))
    assert fmi(u, x, y) == pytest.approx(np.mean(terms), abs=1e-12)


@given(images, images, images)
def test_fmi_bounded(u, x, y):
    assert 0.0 <= fmi(u, x, y) <= 1.0


def test_gradient_magnitude_in_unit_range():
    step = np.zeros((8, 8))
    step[:, 4:] = 1.0
    g = gradient_magnitude(step)
    assert g.min() >= 0.0 and g.max() <= 1.0 and g.max() > 0.5


def test_errors_on_empty_or_mismatched():
    with pytest.raises(UsageError):
        mutual_information(np.zeros((0,)), np.zeros((0,)))
    with pytest.raises(UsageError):
        fmi(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)))


def test_report_fields(rng):
    u, x, y = rng.random((3, 16, 16))
    r = report("p0", u, x, y)
    assert r.mi_total == pytest.approx(r.mi_x + r.mi_y, abs=1e-15)
    assert tuple(r.row()) == CSV_COLUMNS
    assert 0.0 <= r.entropy_u <= 8.0
