import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskfusion.errors import DataError, LabelRangeError, PGMFormatError, ShapeMismatchError
from taskfusion.harness.data import (
    BatchSampler,
    ModalityPair,
    load_dir,
    load_pair,
    read_pgm,
    save_pair,
    split_pairs,
    stack,
    synth_pair,
    synth_pairs,
    to_bytes,
    write_pgm,
)


def raw_pgm(path, header: bytes, data: bytes):
    path.write_bytes(header + data)
    return path


def test_synth_deterministic():
    a, b = synth_pair(9), synth_pair(9)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_targets_bright_in_ir_dark_in_visible():
    for seed in range(30):
        p = synth_pair(seed)
        t = p.labels == 1
        assert t.any()
        assert p.x[t].min() > 0.8 and p.y[t].max() < 0.4


def test_all_classes_present_over_100_seeds():
    for seed in range(100):
        assert set(np.unique(synth_pair(seed, size=32).labels)) == {0, 1, 2}


def test_synth_range_and_size_guard():
    p = synth_pair(1, size=24)
    assert p.shape == (24, 24)
    assert 0.0 <= p.x.min() and p.x.max() <= 1.0 and 0.0 <= p.y.min() and p.y.max() <= 1.0
    with pytest.raises(DataError):
        synth_pair(0, size=8)


def test_two_class_scenes_have_no_texture():
    assert set(np.unique(synth_pair(3, classes=2).labels)) <= {0, 1}


def test_synth_pairs_prepared():
    pairs = synth_pairs(3, seed=0, size=16)
    assert len({p.id for p in pairs}) == 3
    assert all(p.u_m is not None for p in pairs)


def test_pgm_example(tmp_path):
    path = raw_pgm(tmp_path / "a.pgm", b"P5\n2 2\n255\n", bytes([0, 128, 255, 64]))
    np.testing.assert_array_equal(read_pgm(path), [[0, 128], [255, 64]])
    p = load_pair(path, path)
    np.testing.assert_allclose(p.x, [[0, 128 / 255], [1, 64 / 255]], rtol=0, atol=0)


def test_pgm_header_comments(tmp_path):
    path = raw_pgm(tmp_path / "c.pgm", b"P5\n# made by hand\n3 1\n# max\n255\n", bytes([1, 2, 3]))
    np.testing.assert_array_equal(read_pgm(path), [[1, 2, 3]])


@pytest.mark.parametrize(
    "header,data",
    [
        (b"P2\n2 2\n255\n", b"0 1 2 3"),
        (b"P5\n2 2\n65535\n", bytes(8)),
        (b"P5\n2 2\n255\n", bytes(3)),
        (b"P5\n2 x\n255\n", bytes(4)),
        (b"P5\n2", b""),
        (b"P5\n0 2\n255\n", b""),
    ],
)
def test_malformed_pgm(tmp_path, header, data):
    with pytest.raises(PGMFormatError, match="bad.pgm"):
        read_pgm(raw_pgm(tmp_path / "bad.pgm", header, data))


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        read_pgm(tmp_path / "nope.pgm")


@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_pgm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "r.pgm"
    write_pgm(path, img)
    np.testing.assert_array_equal(read_pgm(path), img)


def test_float_images_round_to_bytes():
    np.testing.assert_array_equal(to_bytes(np.array([0.0, 0.5, 1.0, 1.2])), [0, 128, 255, 255])
    with pytest.raises(DataError):
        to_bytes(np.array([300]))


def test_shape_mismatch(tmp_path):
    a = raw_pgm(tmp_path / "a.pgm", b"P5\n2 2\n255\n", bytes(4))
    b = raw_pgm(tmp_path / "b.pgm", b"P5\n3 1\n255\n", bytes(3))
    with pytest.raises(ShapeMismatchError):
        load_pair(a, b)
    with pytest.raises(ShapeMismatchError):
        load_pair(a, a, b)
    with pytest.raises(ShapeMismatchError):
        ModalityPair(np.zeros((2, 2)), np.zeros((2, 3)))


def test_label_out_of_range(tmp_path):
    a = raw_pgm(tmp_path / "a.pgm", b"P5\n2 2\n255\n", bytes(4))
    lab = raw_pgm(tmp_path / "lab.pgm", b"P5\n2 2\n255\n", bytes([0, 1, 2, 3]))
    with pytest.raises(LabelRangeError, match="lab.pgm"):
        load_pair(a, a, lab, classes=3)


def test_directory_round_trip(tmp_path):
    pairs = synth_pairs(3, seed=1, size=16)
    for p in pairs:
        save_pair(p, tmp_path)
    loaded = load_dir(tmp_path)
    assert [p.id for p in loaded] == sorted(p.id for p in pairs)
    src = {p.id: p for p in pairs}
    for p in loaded:
        np.testing.assert_array_equal(p.labels, src[p.id].labels)
        assert np.max(np.abs(p.x - src[p.id].x)) <= 0.5 / 255 + 1e-12


def test_directory_errors(tmp_path):
    with pytest.raises(DataError):
        load_dir(tmp_path / "missing")
    with pytest.raises(DataError):
        load_dir(tmp_path)
    raw_pgm(tmp_path / "s_ir.pgm", b"P5\n1 1\n255\n", bytes(1))
    with pytest.raises(DataError, match="visible"):
        load_dir(tmp_path)


def test_split_sizes_and_disjointness():
    pairs = synth_pairs(16, seed=0, size=16)
    train, val = split_pairs(pairs, 0.8, np.random.default_rng(0))
    assert (len(train), len(val)) == (13, 3) or (len(train), len(val)) == (12, 4)
    assert not {p.id for p in train} & {p.id for p in val}
    with pytest.raises(DataError):
        split_pairs(pairs[:1], 0.5, np.random.default_rng(0))


def test_stack_and_sampler(smoke_pairs):
    b = stack(smoke_pairs[:3])
    assert b.x.shape == (3, 1, 16, 16) and b.labels.shape == (3, 16, 16) and len(b) == 3
    s = BatchSampler(smoke_pairs, 3, np.random.default_rng(0))
    assert s.per_epoch == 2
    seen = [s.next().ids for _ in range(2)]
    assert len(set(seen[0]) | set(seen[1])) == 6
    with pytest.raises(DataError):
        stack([])
    with pytest.raises(ShapeMismatchError):
        stack([synth_pair(0, 16).prepare(), synth_pair(0, 24).prepare()])
