import numpy as np
import pytest

from taskfusion.checks import network_gradchecks
from taskfusion.errors import ConfigError, DataError, ShapeError, UsageError
from taskfusion.networks import (
    FusionPass,
    discriminator_forward,
    dump_params,
    fusion_forward,
    init_params,
    load_params,
    param_count,
    parse_params,
    save_params,
    task_forward,
    zeros_like_params,
)
from taskfusion.tensor import Tape, Tensor
from taskfusion import tensor as T


def test_zero_fusion_network_outputs_half():
    u = fusion_forward(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)), zeros_like_params("omega"))
    np.testing.assert_array_equal(u.data, 0.5)


@pytest.mark.parametrize("h,w", [(8, 8), (9, 13), (32, 32)])
def test_fusion_preserves_shape_and_range(h, w, rng):
    x, y = rng.random((2, 2, 1, h, w))
    u = fusion_forward(x, y, init_params("omega", 0)).data
    assert u.shape == (2, 1, h, w)
    assert u.min() >= 0.0 and u.max() <= 1.0


def test_fusion_accepts_plain_images(rng):
    x, y = rng.random((2, 8, 8))
    assert fusion_forward(x, y, init_params("omega", 0)).shape == (1, 1, 8, 8)


def test_fusion_rejects_mismatched_inputs():
    with pytest.raises(ShapeError):
        fusion_forward(np.zeros((8, 8)), np.zeros((8, 9)), init_params("omega", 0))


def test_zero_critic_scores_zero(rng):
    s = discriminator_forward(rng.random((3, 1, 16, 16)), zeros_like_params("theta_V")).data
    np.testing.assert_array_equal(s, np.zeros((3, 1)))


def test_critic_needs_16_pixels():
    with pytest.raises(UsageError):
        discriminator_forward(np.zeros((1, 1, 8, 16)), init_params("theta_V", 0))


def test_critic_scores_finite(rng):
    assert np.isfinite(discriminator_forward(rng.random((2, 1, 32, 32)), init_params("theta_V", 0)).data).all()


def test_zero_task_head_is_uniform(rng):
    logits = task_forward(rng.random((1, 1, 8, 8)), zeros_like_params("theta_P")).data
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(p, 1.0 / 3.0, atol=1e-15)


def test_task_logit_shape():
    assert task_forward(np.zeros((32, 32)), init_params("theta_P", 0)).shape == (1, 3, 32, 32)


def test_init_deterministic_and_seed_dependent():
    a, b, c = init_params("omega", 5), init_params("omega", 5), init_params("omega", 6)
    np.testing.assert_array_equal(a.flatten(), b.flatten())
    assert not np.array_equal(a.flatten(), c.flatten())


def test_init_std_matches_fan_in():
    p = init_params("theta_V", 0)
    w = p["c3.w"].data  # 64 x 64 x 3 x 3 = 36864 draws
    fan_in = w.shape[1] * 9
    assert w.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.1)


def test_biases_start_at_zero():
    p = init_params("omega", 0)
    assert all(not v.data.any() for k, v in p.entries.items() if k.endswith(".b"))


def test_unknown_param_set_rejected():
    with pytest.raises(ConfigError):
        init_params("theta_X", 0)


def test_parameter_budget():
    assert param_count(init_params("omega", 0)) < 100_000


def test_flatten_round_trip(rng):
    p = init_params("theta_P", 0)
    flat = rng.standard_normal(p.count)
    p.load_flat(flat)
    np.testing.assert_array_equal(p.flatten(), flat)
    with pytest.raises(ShapeError):
        p.unflatten(flat[:-1])


def test_forwards_are_pure(rng):
    x, y = rng.random((2, 1, 1, 16, 16))
    omega = init_params("omega", 1)
    np.testing.assert_array_equal(fusion_forward(x, y, omega).data, fusion_forward(x, y, omega).data)


@pytest.mark.parametrize("name,err", sorted(network_gradchecks().items()))
def test_network_gradcheck(name, err):
    assert err < 1e-5, name


def test_fusion_pass_pullback_matches_direct_backprop(rng):
    x, y = rng.random((2, 2, 1, 8, 8))
    cot = rng.standard_normal((2, 1, 8, 8))
    omega = init_params("omega", 2)
    fp = FusionPass(x, y, omega)
    g1 = fp.pullback(cot)
    g2 = fp.pullback(cot)
    with Tape() as tape:
        loss = T.sum(T.mul(fusion_forward(x, y, omega), Tensor(cot)))
    tape.backward(loss)
    np.testing.assert_allclose(g1, omega.flat_grad(), rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(g1, g2)
    with pytest.raises(ShapeError):
        fp.pullback(cot[:1])


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    p = init_params("omega", 3)
    p.step_count = 17
    save_params(p, tmp_path / "a.ckpt")
    q = load_params(tmp_path / "a.ckpt")
    save_params(q, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert q.step_count == 17 and q.seed == 3 and list(q.entries) == list(p.entries)


def test_checkpoint_layout():
    p = init_params("theta_P", 0)
    blob = dump_params(p)
    head, payload = blob.split(b"\n", 1)
    assert head.startswith(b"{") and len(payload) == 8 * p.count
    np.testing.assert_array_equal(np.frombuffer(payload, "<f8"), p.flatten())


def test_corrupt_checkpoints_are_data_errors(tmp_path):
    blob = dump_params(init_params("theta_P", 0))
    with pytest.raises(DataError):
        parse_params(blob[:-8])
    with pytest.raises(DataError):
        parse_params(b"not json\n")
    with pytest.raises(DataError):
        parse_params(b"no newline")
    with pytest.raises(DataError):
        load_params(tmp_path / "missing.ckpt")
