import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from outlier_lab import tensor as T
from outlier_lab.softmax import vanilla_softmax
from outlier_lab.tensor import DomainError, ShapeError, Tape, Tensor, finite_diff_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(f, x):
    xt = Tensor(np.asarray(x, dtype=float), requires_grad=True)
    with Tape() as tape:
        tape.backward(f(xt))
    return xt.grad


def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 2], [3, 4]]), Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_clip_forward_and_strict_interior_gradient():
    np.testing.assert_array_equal(T.clip(Tensor([-0.5, 0.3, 1.7]), 0, 1).data, [0, 0.3, 1])
    g = grad_of(lambda x: T.sum_axis(T.clip(x, 0, 1)), [-1.0, 0.5, 2.0])
    np.testing.assert_array_equal(g, [0, 1, 0])
    # exactly on a boundary counts as clipped
    g = grad_of(lambda x: T.sum_axis(T.clip(x, 0, 1)), [0.0, 1.0])
    np.testing.assert_array_equal(g, [0, 0])


def test_layer_norm_of_constant_is_zero():
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full(6, 3.5))).data, np.zeros(6))


def test_square_gradient():
    np.testing.assert_array_equal(grad_of(lambda x: T.sum_axis(T.mul(x, x)), [1.0, 2.0]), [2, 4])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape, pytest.raises(ShapeError):
        tape.backward(T.scale(x, 2.0))


def test_log_domain():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_finite_diff_exp():
    assert finite_diff_check(lambda x: T.sum_axis(T.exp(x)), np.array([0.0, 1.0])) < 1e-6


def test_finite_diff_softmax_squares():
    x = np.random.default_rng(1).normal(size=8)
    f = lambda t: T.sum_axis(T.mul(vanilla_softmax(t), vanilla_softmax(t)))  # noqa: E731
    assert finite_diff_check(f, x) < 1e-5


def test_sum_of_softmax_has_zero_gradient():
    g = grad_of(lambda x: T.sum_axis(vanilla_softmax(x)), np.random.default_rng(2).normal(size=(3, 5)))
    assert np.max(np.abs(g)) < 1e-15


@pytest.mark.parametrize("name,f,shape", [
    ("matmul", lambda x: T.sum_axis(T.mul(T.matmul(x, Tensor(np.arange(12.0).reshape(4, 3) / 7)), 1.3)), (2, 4)),
    ("batched_matmul", lambda x: T.sum_axis(T.matmul(x, T.transpose(x, (0, 2, 1)))), (2, 3, 4)),
    ("add_broadcast", lambda x: T.sum_axis(T.mul(T.add(x, Tensor([0.5, -1.0, 2.0])), x)), (4, 3)),
    ("mul", lambda x: T.sum_axis(T.mul(x, T.exp(x))), (5,)),
    ("log", lambda x: T.sum_axis(T.log(T.add(T.mul(x, x), 1.0))), (5,)),
    ("max_axis", lambda x: T.sum_axis(T.max_axis(x, axis=-1)), (3, 4)),
    ("layer_norm", lambda x: T.sum_axis(T.mul(T.layer_norm(x, Tensor([1.0, 2, 3, 4]), Tensor([0.1] * 4)),
                                              Tensor([0.3, -1.0, 2.0, 0.7]))), (2, 4)),
    ("gelu", lambda x: T.sum_axis(T.gelu(x)), (6,)),
    ("reshape_transpose", lambda x: T.sum_axis(T.mul(T.transpose(T.reshape(x, (2, 3)), (1, 0)),
                                                     Tensor(np.arange(6.0).reshape(3, 2)))), (6,)),
    ("cross_entropy", lambda x: T.cross_entropy(x, np.array([1, 0, -100])), (3, 4)),
])
def test_primitive_gradients(name, f, shape):
    x = np.random.default_rng(3).normal(size=shape)
    assert finite_diff_check(f, x) < 1e-5, name


def test_embedding_lookup_accumulates_repeated_rows():
    table = np.random.default_rng(0).normal(size=(5, 3))
    g = grad_of(lambda t: T.sum_axis(T.embedding_lookup(t, np.array([1, 1, 4]))), table)
    np.testing.assert_array_equal(g[:, 0], [0, 2, 0, 0, 1])


def test_masked_fill_blocks_gradient():
    mask = np.array([True, False, True])
    g = grad_of(lambda x: T.sum_axis(T.mul(T.masked_fill(x, mask, 0.0), x)), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(g, [0, 4, 0])


def test_cross_entropy_needs_targets():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-100, -100]))


def test_no_tape_no_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.scale(x, 3.0)
    assert y.node_id is None


def test_primitive_forward_dispatch():
    out = T.primitive_forward("clip", [Tensor([-1.0, 0.5, 2.0])], lo=0.0, hi=1.0)
    np.testing.assert_array_equal(out.data, [0, 0.5, 1])
    with pytest.raises(ValueError):
        T.primitive_forward("nope", [])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 7), elements=finite))
def test_composite_gradient_property(x):
    f = lambda t: T.sum_axis(T.mul(T.gelu(t), vanilla_softmax(T.scale(t, 0.7))))  # noqa: E731
    assert finite_diff_check(f, x) < 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_forward_is_deterministic(x):
    f = lambda: T.layer_norm(T.gelu(T.matmul(Tensor(x), Tensor(x.T))))  # noqa: E731
    np.testing.assert_array_equal(f().data, f().data)
