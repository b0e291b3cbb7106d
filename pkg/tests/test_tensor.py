import numpy as np
import pytest

from helpers_fd import check_gradients
from rationale_forge import tensor as T
from rationale_forge.tensor import (NonFiniteError, ShapeError, Tape, TapeError,
                                    Tensor, backward)


def naive_matmul(a, b):
    """Triple-loop product, the oracle for the vectorized op."""
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_sigmoid_symmetry():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_softmax_identical_logits():
    out = T.softmax(Tensor([[2.0, 2.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.uniform(-2, 2, (2, 3))
    b = rng.uniform(-2, 2, (3, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = T.softmax(Tensor(rng.uniform(-5, 5, (40, 7))))
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_log_softmax_exponentiates_back():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-5, 5, (30, 5)))
    np.testing.assert_allclose(np.exp(T.log_softmax(x).data),
                               T.softmax(x).data, rtol=0, atol=1e-10)


def test_backward_linear_map():
    x = np.array([1.5, -2.0, 0.25])
    w = T.parameter(np.array([0.1, 0.2, 0.3]))
    with Tape():
        loss = T.total(T.mul(w, Tensor(x)))
    backward(loss)
    np.testing.assert_array_equal(w.grad, x)


def test_backward_chain_rule_by_hand():
    w = T.parameter(0.0)
    with Tape():
        s = T.sigmoid(w)
        loss = T.mul(s, s)
    backward(loss)
    # d/dw sigmoid(w)^2 at 0 = 2 * 0.5 * 0.25
    assert w.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_requires_scalar():
    w = T.parameter(np.ones(3))
    with Tape():
        out = T.mul(w, w)
    with pytest.raises(ShapeError):
        backward(out)


def test_backward_detached_graph():
    loss = T.total(Tensor(np.ones(3)))  # no tape active, nothing recorded
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_twice_is_an_error():
    w = T.parameter(np.ones(3))
    with Tape():
        loss = T.total(w)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_gradients_accumulate_until_reset():
    w = T.parameter(np.ones(2))
    for expected in (np.ones(2), 2 * np.ones(2)):
        with Tape():
            loss = T.total(w)
        backward(loss)
        np.testing.assert_array_equal(w.grad, expected)
    T.zero_grad([w])
    assert w.grad is None


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 3\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_non_finite_output_is_an_error():
    with pytest.raises(NonFiniteError, match="affine"):
        T.affine(Tensor([1.0]), np.inf)


def test_embedding_rejects_out_of_vocab():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        T.embedding(table, np.array([0, 4]))


@pytest.mark.parametrize("seed", [0, 1])
def test_elementwise_and_reduction_gradients(seed):
    rng = np.random.default_rng(seed)
    a = T.parameter(rng.uniform(-2, 2, (3, 4)))
    b = T.parameter(rng.uniform(-2, 2, (3, 4)))

    def build():
        x = T.mul(T.add(a, b), T.sub(a, b))
        x = T.add(T.tanh(x), T.sigmoid(x))
        return T.mean(T.absolute(T.affine(x, 1.3, 0.2)))

    check_gradients(build, [a, b], rng, coords_per_param=6)


def test_matmul_and_bias_gradients():
    rng = np.random.default_rng(2)
    a = T.parameter(rng.uniform(-2, 2, (4, 3)))
    b = T.parameter(rng.uniform(-2, 2, (3, 5)))
    bias = T.parameter(rng.uniform(-2, 2, 5))

    def build():
        return T.mean(T.tanh(T.add_bias(T.matmul(a, b), bias)))

    check_gradients(build, [a, b, bias], rng, coords_per_param=6)


def test_softmax_family_gradients():
    rng = np.random.default_rng(3)
    x = T.parameter(rng.uniform(-2, 2, (5, 4)))

    def build_softmax():
        return T.mean(T.mul(T.softmax(x), T.softmax(x)))

    def build_log_softmax():
        return T.mean(T.log_softmax(x))

    check_gradients(build_softmax, [x], rng, coords_per_param=8)
    check_gradients(build_log_softmax, [x], rng, coords_per_param=8)


def test_shape_op_gradients():
    rng = np.random.default_rng(4)
    a = T.parameter(rng.uniform(-2, 2, (4, 1)))
    b = T.parameter(rng.uniform(-2, 2, (1, 6)))
    c = T.parameter(rng.uniform(-2, 2, (4, 6)))

    def build():
        x = T.mul(T.expand_cols(a, 6), T.tile_rows(b, 4))
        x = T.concat([T.narrow(x, 1, 0, 3), T.narrow(c, 1, 1, 3)], axis=0)
        return T.mean(T.reshape(x, (3, 8)))

    check_gradients(build, [a, b, c], rng, coords_per_param=5)


def test_axis_reduction_gradients():
    rng = np.random.default_rng(5)
    x = T.parameter(rng.uniform(-2, 2, (3, 5)))

    def build():
        return T.total(T.mul(T.mean(x, axis=0), T.total(x, axis=0)))

    check_gradients(build, [x], rng, coords_per_param=10)


def test_gather_and_embedding_gradients():
    rng = np.random.default_rng(6)
    table = T.parameter(rng.uniform(-2, 2, (7, 3)))
    head = T.parameter(rng.uniform(-2, 2, (3, 4)))
    ids = np.array([1, 3, 3, 6, 0])
    labels = np.array([0, 2, 1, 3, 3])

    def build():
        logits = T.matmul(T.embedding(table, ids), head)
        return T.mean(T.gather_labels(T.log_softmax(logits), labels))

    check_gradients(build, [table, head], rng, coords_per_param=8)


def test_straight_through_passes_gradient_unchanged():
    rng = np.random.default_rng(8)
    x = T.parameter(rng.uniform(-1, 1, (4, 1)))
    hard = (rng.random((4, 1)) > 0.5).astype(float)
    weights = Tensor(rng.uniform(-1, 1, (4, 1)))
    with Tape():
        soft = T.sigmoid(x)
        loss = T.total(T.mul(T.straight_through(soft, hard), weights))
    backward(loss)
    grad_hard = x.grad.copy()
    T.zero_grad([x])
    with Tape():
        loss = T.total(T.mul(T.sigmoid(x), weights))
    backward(loss)
    np.testing.assert_array_equal(grad_hard, x.grad)


def test_determinism_bitwise():
    def run(seed):
        rng = np.random.default_rng(seed)
        w = T.parameter(rng.uniform(-2, 2, (3, 3)))
        x = Tensor(rng.uniform(-2, 2, (3, 3)))
        with Tape() as tape:
            loss = T.mean(T.sigmoid(T.matmul(w, x)))
        backward(loss)
        return tape.op_names(), loss.data.copy(), w.grad.copy()

    ops1, val1, grad1 = run(42)
    ops2, val2, grad2 = run(42)
    assert ops1 == ops2
    assert val1.tobytes() == val2.tobytes()
    assert grad1.tobytes() == grad2.tobytes()
