import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskfusion import tensor as T
from taskfusion.checks import op_gradchecks
from taskfusion.errors import NumericError, ShapeError, UsageError
from taskfusion.tensor import Tape, Tensor, backward, grad_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_tape_records_only_when_grad_needed():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        T.add(a, a)
        assert len(tape) == 0
        T.mul(a, b)
        assert len(tape) == 1


def test_no_recording_outside_tape():
    w = Tensor([2.0], requires_grad=True)
    out = T.square(w)
    assert out.is_leaf and not out.requires_grad


def test_square_backward():
    w = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.square(w))
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, [6.0])


def test_gradients_accumulate_over_shared_use():
    w = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = T.add(T.mul(w, w), T.scale(w, 3.0))
    tape.backward(loss)
    assert w.grad == pytest.approx(7.0, abs=1e-15)


def test_backward_rejects_vector_loss():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = T.square(w)
    with pytest.raises(UsageError):
        tape.backward(out)


def test_module_backward_uses_recording_tape():
    w = Tensor([1.5], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(w, w))
        backward(loss)
    assert w.grad[0] == pytest.approx(3.0)
    del tape


def test_backward_on_foreign_tape_fails():
    w = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = T.sum(w)
    with pytest.raises(UsageError):
        Tape().backward(loss)


def test_non_finite_values_rejected():
    with pytest.raises(NumericError):
        Tensor([np.nan])
    with pytest.raises(NumericError):
        T.sqrt(Tensor([-1.0]))


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(a, b))
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, [3.0, 3.0, 3.0, 3.0])
    np.testing.assert_array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_sqrt_and_norm_use_zero_subgradient_at_zero():
    z = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = T.add(T.sum(T.l2_norm(z)), T.sum(T.sqrt(z)))
    tape.backward(loss)
    np.testing.assert_array_equal(z.grad, np.zeros((2, 3)))


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_log_softmax_rows_normalize(rng):
    out = T.log_softmax(Tensor(rng.standard_normal((2, 5, 3))), axis=1).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-14)


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad, dil in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)]:
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, dilation=dil).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        span = dil * 2 + 1
        ho = (xp.shape[2] - span) // stride + 1
        wo = (xp.shape[3] - span) // stride + 1
        want = np.zeros((2, 4, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * stride : i * stride + span : dil, j * stride : j * stride + span : dil]
                want[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("name,err", sorted(op_gradchecks().items()))
def test_op_gradcheck(name, err):
    assert err < 1e-5, name


def test_grad_check_square_example():
    assert grad_check(lambda w: T.sum(T.square(w)), np.array([2.0]), h=1e-6) < 1e-8


def test_grad_check_constant_function_is_zero():
    assert grad_check(lambda w: T.sum(Tensor(np.ones(3))), np.array([1.0, 2.0])) == 0.0


def test_grad_check_sigmoid_conv_4x4(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))
    err = grad_check(lambda a, k: T.sum(T.sigmoid(T.conv2d(a, k, padding=1))), [x, w])
    assert err < 1e-5


def test_grad_check_rejects_bad_step():
    with pytest.raises(UsageError):
        grad_check(lambda w: T.sum(w), np.ones(2), h=0.0)
    with pytest.raises(UsageError):
        grad_check(lambda w: T.sum(w), np.ones(2), h=0.1)


def test_grad_check_flags_a_wrong_gradient():
    def bad(w):
        # value 2w^2 but backward of w^2
        return T.add(T.sum(T.square(w)), Tensor(float(np.sum(w.data**2))))

    assert grad_check(bad, np.array([1.0, -2.0])) > 0.5


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_mul_gradient_property(a, b):
    assert grad_check(lambda p, q: T.sum(T.mul(p, q)), [a, b]) < 1e-7


@given(arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_gradient_property(a):
    w = np.linspace(-1, 1, 10).reshape(2, 5)
    assert grad_check(lambda p: T.sum(T.mul(T.log_softmax(p, axis=1), Tensor(w))), a) < 1e-6


def test_tape_is_released_after_use():
    import gc
    import weakref

    w = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        T.sum(T.square(w))
    ref = weakref.ref(tape)
    del tape
    gc.disable()
    try:
        assert ref() is None
    finally:
        gc.enable()
