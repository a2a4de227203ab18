import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgm import tensor as T
from oracles import central_difference, relative_error

RTOL = 1e-5


def _rand(rng, shape, positive=False):
    x = rng.standard_normal(shape)
    return np.abs(x) + 0.5 if positive else x


def _away_from_zero(rng, shape):
    """Values with |x| >= 0.1, so kinks of piecewise ops stay outside the
    finite-difference stencil."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1, x)


# each case: (name, input factory, scalar function of tensors)
def _cases():
    w = lambda r, s: r.standard_normal(s)
    return [
        ("add", lambda r, n, p: [w(r, (n, p)), w(r, (p,))], lambda a, b: T.tsum(T.square(T.add(a, b)))),
        ("sub", lambda r, n, p: [w(r, (n, p)), w(r, (n, 1))], lambda a, b: T.tsum(T.square(T.sub(a, b)))),
        ("mul", lambda r, n, p: [w(r, (n, p)), w(r, (n, p))], lambda a, b: T.tsum(T.mul(a, b))),
        ("div", lambda r, n, p: [w(r, (n, p)), _rand(r, (n, p), True)], lambda a, b: T.tsum(T.div(a, b))),
        ("exp", lambda r, n, p: [w(r, (n, p))], lambda a: T.mean(T.exp(a))),
        ("log", lambda r, n, p: [_rand(r, (n, p), True)], lambda a: T.tsum(T.log(a))),
        ("sqrt", lambda r, n, p: [_rand(r, (n, p), True)], lambda a: T.tsum(T.sqrt(a))),
        ("tanh", lambda r, n, p: [w(r, (n, p))], lambda a: T.tsum(T.square(T.tanh(a)))),
        ("sigmoid", lambda r, n, p: [w(r, (n, p))], lambda a: T.tsum(T.square(T.sigmoid(a)))),
        ("leaky_relu", lambda r, n, p: [_away_from_zero(r, (n, p))], lambda a: T.tsum(T.square(T.leaky_relu(a)))),
        ("matmul", lambda r, n, p: [w(r, (n, p)), w(r, (p, 3))], lambda a, b: T.tsum(T.square(T.matmul(a, b)))),
        ("dense", lambda r, n, p: [w(r, (n, p)), w(r, (p, 4)), w(r, (4,))],
         lambda x, W, b: T.mean(T.square(T.dense(x, W, b)))),
        ("log_softmax", lambda r, n, p: [w(r, (n, p))], lambda a: T.tsum(T.mul(T.log_softmax(a), a))),
        ("cross_entropy", lambda r, n, p: [w(r, (n, p))],
         lambda a: T.cross_entropy(a, np.arange(a.shape[0]) % a.shape[1])),
        ("row_norm", lambda r, n, p: [w(r, (n, p))], lambda a: T.tsum(T.row_norm(a))),
        ("concat_take", lambda r, n, p: [w(r, (n, p)), w(r, (n, 2))],
         lambda a, b: T.tsum(T.square(T.take(T.concat([a, b], axis=1), slice(1, None), axis=1)))),
        ("mean_axis", lambda r, n, p: [w(r, (n, p))], lambda a: T.tsum(T.square(T.mean(a, axis=0)))),
        ("transpose_reshape", lambda r, n, p: [w(r, (n, p))],
         lambda a: T.tsum(T.mul(T.reshape(T.transpose(a), (a.data.size,)),
                                T.Tensor(np.arange(a.data.size, dtype=float))))),
    ]


CASES = _cases()
TRIALS_PER_OP = 8  # 18 ops x 8 = 144 randomized trials


@pytest.mark.parametrize("name,make,fn", CASES, ids=[c[0] for c in CASES])
def test_op_gradients_match_central_differences(name, make, fn):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(TRIALS_PER_OP):
        n, p = (int(v) for v in rng.integers(1, 9, size=2))
        if name == "cross_entropy":
            p = max(p, 2)
        arrays = make(rng, n, p)
        tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
        analytic = T.grad(fn(*tensors), tensors)
        numeric = central_difference(lambda: fn(*[T.Tensor(a) for a in arrays]).item(), arrays)
        for g_a, g_n in zip(analytic, numeric):
            assert relative_error(g_a.data, g_n) < RTOL, name


def test_double_backward_through_gradient_norm():
    """d/dW of ||d f / d x|| for a two-layer leaky net, against differences."""
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = _away_from_zero(rng, (4, 3))
        W1, b1 = rng.standard_normal((3, 5)), rng.standard_normal(5)
        W2 = rng.standard_normal((5, 1))

        def penalty(W1, b1, W2, record=True):
            xt = T.Tensor(x, requires_grad=True)
            out = T.tsum(T.matmul(T.tanh(T.dense(xt, W1, b1)), W2))
            norms = T.input_gradient_norm(out, xt, create_graph=record)
            return T.mean(T.square(T.sub(norms, 1.0)))
        params = [T.Tensor(a, requires_grad=True) for a in (W1, b1, W2)]
        analytic = T.grad(penalty(*params), params)
        numeric = central_difference(lambda: penalty(*[T.Tensor(a) for a in (W1, b1, W2)]).item(), [W1, b1, W2])
        for g_a, g_n in zip(analytic, numeric):
            assert relative_error(g_a.data, g_n) < RTOL


# ------------------------------------------------------------ documented examples

def test_dense_examples():
    np.testing.assert_array_equal(T.dense(T.Tensor([[1.0, 2.0]]), T.Tensor(np.eye(2)), T.Tensor([0.0, 0.0])).data,
                                  [[1.0, 2.0]])
    np.testing.assert_array_equal(
        T.dense(T.Tensor([[1.0, 1.0]]), T.Tensor([[2.0, 3.0], [4.0, 5.0]]), T.Tensor([1.0, 1.0])).data, [[7.0, 9.0]])
    W = np.random.default_rng(0).standard_normal((2, 2))
    np.testing.assert_array_equal(T.dense(T.Tensor([[0.0, 0.0]]), T.Tensor(W), T.Tensor([5.0, -5.0])).data,
                                  [[5.0, -5.0]])


def test_dense_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 3\).*\(2, 2\)"):
        T.dense(T.Tensor(np.ones((1, 3))), T.Tensor(np.ones((2, 2))), T.Tensor(np.zeros(2)))


def test_quadratic_form_gradient_is_w():
    W = T.Parameter(np.random.default_rng(1).standard_normal((3, 4)))
    loss = T.mul(T.tsum(T.mul(W, W)), 0.5)
    T.backward(loss, [W])
    np.testing.assert_array_equal(W.grad, W.data)


def test_zero_gate_annihilates_gradient():
    W = T.Parameter(np.ones((2, 2)))
    W.gate = np.zeros((2, 2))
    T.backward(T.tsum(T.square(W)), [W])
    assert np.all(W.grad == 0.0)


def test_non_scalar_output_is_rejected():
    a = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.grad(T.mul(a, 2.0), [a])


def test_disconnected_parameter_gets_zero_gradient():
    a = T.Parameter(np.ones(3))
    unused = T.Parameter(np.ones((2, 2)))
    T.backward(T.tsum(a), [a, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_input_gradient_norm_examples():
    x = T.Tensor(np.random.default_rng(2).standard_normal((5, 2)), requires_grad=True)
    const = T.add(T.mul(T.tsum(x), 0.0), 3.0)
    np.testing.assert_array_equal(T.input_gradient_norm(const, x).data, np.zeros(5))
    lin = T.tsum(T.matmul(x, T.Tensor([[3.0], [4.0]])))
    np.testing.assert_allclose(T.input_gradient_norm(lin, x).data, np.full(5, 5.0), rtol=1e-15)
    x7 = T.Tensor(np.ones((3, 7)), requires_grad=True)
    np.testing.assert_allclose(T.input_gradient_norm(T.tsum(x7), x7).data, np.full(3, np.sqrt(7)), rtol=1e-15)


def test_input_gradient_norm_requires_designated_input():
    x = T.Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        T.input_gradient_norm(T.tsum(x), x)


def test_row_norm_of_zero_row_has_zero_gradient():
    a = T.Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    (g,) = T.grad(T.tsum(T.row_norm(a)), [a])
    np.testing.assert_array_equal(g.data, [[0.0, 0.0], [0.6, 0.8]])


def test_non_finite_values_raise_naming_the_op():
    with pytest.raises(FloatingPointError, match="log"):
        with np.errstate(divide="ignore"):
            T.log(T.Tensor([0.0]))
    with pytest.raises(FloatingPointError, match="div"):
        with np.errstate(divide="ignore"):
            T.div(T.Tensor([1.0]), T.Tensor([0.0]))


def test_no_grad_records_nothing():
    a = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        out = T.mul(a, 2.0)
    assert not out.requires_grad and out.parents == ()


def test_replaying_graph_is_bit_identical():
    rng = np.random.default_rng(4)
    x, W, b = rng.standard_normal((6, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)

    def run():
        Wt = T.Tensor(W, requires_grad=True)
        loss = T.mean(T.square(T.leaky_relu(T.dense(T.Tensor(x), Wt, T.Tensor(b)))))
        return loss.item(), T.grad(loss, [Wt])[0].data
    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_broadcast_add_unbroadcasts_gradient(n, p, seed):
    rng = np.random.default_rng(seed)
    a = T.Tensor(rng.standard_normal((n, p)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((1, p)), requires_grad=True)
    ga, gb = T.grad(T.tsum(T.add(a, b)), [a, b])
    assert ga.shape == (n, p) and gb.shape == (1, p)
    np.testing.assert_array_equal(gb.data, np.full((1, p), float(n)))


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_sigmoid_stays_in_unit_interval(values):
    out = T.sigmoid(T.Tensor(np.array(values))).data
    assert np.all((out >= 0) & (out <= 1))
