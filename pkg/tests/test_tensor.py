import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meshuda import tensor as T
from meshuda.exceptions import DegenerateSegmentError, NumericError, ShapeError
from oracles import central_difference

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def matrices(rows=st.integers(1, 5), cols=st.integers(1, 5)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def tape_grad(fn, x0):
    leaf = T.parameter(x0)
    with T.Tape() as tape:
        out = fn(leaf)
    return out, T.backward(out, tape, [leaf])[leaf]


UNARY = {
    "tanh": (T.tanh, np.tanh),
    "sigmoid": (T.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "exp": (T.exp, np.exp),
    "gelu": (T.gelu, lambda x: 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))),
    "neg": (T.neg, lambda x: -x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=matrices())
def test_unary_values_and_gradients(name, x):
    op, ref = UNARY[name]
    w = np.cos(np.arange(x.size)).reshape(x.shape)
    out, g = tape_grad(lambda a: T.reduce_sum(T.mul(op(a), w)), x)
    assert np.allclose(op(T.Tensor(x)).data, ref(x), rtol=1e-12, atol=1e-12)
    num = central_difference(lambda v: float(np.sum(ref(v) * w)), x)
    assert np.allclose(g, num, rtol=1e-6, atol=1e-6)


@given(x=arrays(np.float64, (3, 4), elements=st.floats(0.1, 3)))
def test_log_gradient(x):
    _, g = tape_grad(lambda a: T.reduce_sum(T.log(a)), x)
    assert np.allclose(g, 1 / x)


def test_relu_gradient_is_indicator():
    x = np.array([[-1.0, 2.0], [0.5, -0.2]])
    _, g = tape_grad(lambda a: T.reduce_sum(T.relu(a)), x)
    assert np.array_equal(g, (x > 0).astype(float))


@given(a=arrays(np.float64, (3, 4), elements=finite), b=arrays(np.float64, (4, 2), elements=finite))
def test_matmul_gradient(a, b):
    _, g = tape_grad(lambda x: T.reduce_sum(T.matmul(x, b)), a)
    assert np.allclose(g, np.ones((3, 2)) @ b.T)


@pytest.mark.parametrize("bshape", [(1, 4), (4,), (3, 1), ()])
def test_broadcast_gradients_reduce_to_operand_shape(bshape):
    a = np.arange(12.0).reshape(3, 4)
    b = np.ones(bshape) * 0.5
    for op in (T.add, T.sub, T.mul):
        _, g = tape_grad(lambda x: T.reduce_sum(op(a, x)), b)
        assert g.shape == np.shape(b)
        num = central_difference(lambda v: float(np.sum(op(T.Tensor(a), T.Tensor(v)).data)), b)
        assert np.allclose(g, num, atol=1e-6)


def test_reductions():
    x = np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 7.0]])
    assert T.reduce_sum(x, axis=0).data.tolist() == [4.0, 14.0]
    assert T.reduce_mean(x).item() == pytest.approx(3.0)
    _, g = tape_grad(lambda a: T.reduce_sum(T.reduce_max(a, axis=0)), x)
    assert np.array_equal(g, [[0, 0], [1, 0], [0, 1]])


def test_concat_and_transpose_gradients():
    x = np.arange(6.0).reshape(2, 3)
    w = np.arange(12.0).reshape(4, 3)
    _, g = tape_grad(lambda a: T.reduce_sum(T.mul(T.concat([a, T.mul(a, 2.0)], axis=0), w)), x)
    assert np.allclose(g, w[:2] + 2 * w[2:])
    _, g = tape_grad(lambda a: T.reduce_sum(T.mul(T.transpose(a), w[:3, :2])), x)
    assert np.allclose(g, w[:3, :2].T)


@given(data=st.data())
def test_segment_ops_against_loops(data):
    n_seg = data.draw(st.integers(1, 4))
    sizes = data.draw(st.lists(st.integers(1, 4), min_size=n_seg, max_size=n_seg))
    ids = np.repeat(np.arange(n_seg), sizes)
    ids = ids[data.draw(st.permutations(range(len(ids))))] if len(ids) > 1 else ids
    x = data.draw(arrays(np.float64, (len(ids), 3), elements=finite))
    mean = T.segment_mean(x, ids, n_seg).data
    mx = T.segment_max(x, ids, n_seg).data
    for s in range(n_seg):
        assert np.allclose(mean[s], x[ids == s].mean(axis=0))
        assert np.array_equal(mx[s], x[ids == s].max(axis=0))
    w = np.sin(np.arange(n_seg * 3)).reshape(n_seg, 3)
    _, g = tape_grad(lambda a: T.reduce_sum(T.mul(T.segment_mean(a, ids, n_seg), w)), x)
    assert np.allclose(g, w[ids] / np.bincount(ids)[ids][:, None])


def test_segment_max_routes_gradient_to_first_winner_on_ties():
    x = np.array([[1.0], [1.0], [0.0]])
    _, g = tape_grad(lambda a: T.reduce_sum(T.segment_max(a, [0, 0, 0], 1)), x)
    assert g.reshape(-1).tolist() == [1.0, 0.0, 0.0]


def test_take_rows_scatter_adds():
    x = np.arange(6.0).reshape(3, 2)
    _, g = tape_grad(lambda a: T.reduce_sum(T.take_rows(a, [0, 0, 2])), x)
    assert g[:, 0].tolist() == [2.0, 0.0, 1.0]


def test_empty_segment_rejected():
    with pytest.raises(DegenerateSegmentError):
        T.segment_mean(np.ones((2, 2)), [0, 0], 2)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.Tensor(np.ones((2, 2, 2)))
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.take_rows(np.ones((2, 2)), [5])
    with pytest.raises(ShapeError):
        leaf = T.parameter(np.ones((2, 2)))
        with T.Tape() as tape:
            out = T.mul(leaf, 2.0)
        T.backward(out, tape)


def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        T.Tensor([np.nan])
    with pytest.raises(NumericError):
        T.exp(np.array([1e4]))


def test_l2_norm_and_clip():
    x = np.array([[3.0, 4.0]])
    assert T.l2_norm(x).item() == 5.0
    _, g = tape_grad(T.l2_norm, np.zeros((1, 2)))
    assert np.array_equal(g, np.zeros((1, 2)))
    assert np.allclose(T.clip_by_norm(x, 1.0).data, [[0.6, 0.8]])
    w = np.array([[0.3, -1.2]])
    _, g = tape_grad(lambda a: T.reduce_sum(T.mul(T.clip_by_norm(a, 1.0), w)), x)
    num = central_difference(lambda v: float(np.sum(T.clip_by_norm(v, 1.0).data * w)), x)
    assert np.allclose(g, num, atol=1e-8)


def test_no_tape_means_no_records_and_unused_params_get_zeros():
    a = T.parameter(np.ones((2, 2)))
    b = T.parameter(np.ones((2, 2)))
    T.mul(a, 2.0)
    with T.Tape() as tape:
        out = T.reduce_sum(T.mul(a, 3.0))
    grads = T.backward(out, tape, [a, b])
    assert len(tape) == 2
    assert np.array_equal(grads[a], np.full((2, 2), 3.0))
    assert np.array_equal(grads[b], np.zeros((2, 2)))


def test_reused_leaf_accumulates():
    x = np.array([[2.0]])
    _, g = tape_grad(lambda a: T.reduce_sum(T.mul(a, a)), x)
    assert g.item() == 4.0


def test_grad_check_flags_a_wrong_gradient():
    def bad(a):
        return T.custom_op(a, a.data * 2.0, lambda g: g, "bad")  # true derivative is 2

    x = np.array([[1.0, -2.0]])
    assert T.grad_check(lambda a: T.reduce_sum(bad(a)), x) == pytest.approx(0.5)
    assert T.grad_check(lambda a: T.reduce_sum(T.mul(a, 2.0)), x) < 1e-9
    with pytest.raises(ValueError):
        T.grad_check(T.reduce_sum, x, step=0)


def test_float32_precision_switch():
    try:
        T.set_default_dtype(np.float32)
        assert T.Tensor([1.0]).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)
