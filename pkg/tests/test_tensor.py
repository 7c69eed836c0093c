import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripletsv import tensor as T
from tripletsv.errors import BatchSizeError, ContractError, DimensionError, DomainError, NumericError

from oracles import numeric_grad, rel_err


def _check_grad(build, arrays, tol=1e-4):
    """build(*tensors) -> scalar Tensor; compare backward with finite differences."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*leaves))
    for leaf, arr in zip(leaves, arrays):
        def f():
            return build(*[T.Tensor(a) for a in arrays]).item()

        num = numeric_grad(f, arr)
        assert rel_err(leaf.grad, num) < tol


def test_matmul_identity_and_dot():
    eye = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(T.matmul(eye, b).data, [[5, 6], [7, 8]])
    assert T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    _check_grad(lambda x, y: T.sum(T.matmul(x, y)), [a, b], tol=1e-6)


def test_relu_sigmoid_values():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5


def test_relu_gradient_at_zero_is_zero():
    x = T.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    T.backward(T.sum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


UNARY = {
    "relu": (T.relu, lambda r: r.normal(size=(3, 4)) + 0.05),
    "sigmoid": (T.sigmoid, lambda r: r.normal(size=(3, 4))),
    "tanh": (T.tanh, lambda r: r.normal(size=(3, 4))),
    "exp": (T.exp, lambda r: r.normal(size=(3, 4))),
    "log": (T.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "sqrt": (T.sqrt, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "square": (T.square, lambda r: r.normal(size=(3, 4))),
    "softplus": (T.softplus, lambda r: r.normal(size=(3, 4))),
    "scale": (lambda t: T.scale(t, -2.5), lambda r: r.normal(size=(3, 4))),
    "log_softmax": (lambda t: T.log_softmax(t, axis=1), lambda r: r.normal(size=(3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_at_random_points(name):
    op, gen = UNARY[name]
    rng = np.random.default_rng(sorted(UNARY).index(name))
    w = rng.normal(size=(3, 4))
    for _ in range(10):
        x = gen(rng)
        if name == "relu":
            x[np.abs(x) < 1e-3] = 0.1
        _check_grad(lambda t: T.sum(T.mul(op(t), w)), [x])


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": T.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_at_random_points(name):
    op = BINARY[name]
    rng = np.random.default_rng(7)
    w = rng.normal(size=(3, 4))
    for _ in range(10):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        _check_grad(lambda x, y: T.sum(T.mul(op(x, y), w)), [a, b])


def test_broadcast_bias_gradient():
    rng = np.random.default_rng(1)
    _check_grad(lambda x, b: T.sum(T.square(T.add(x, b))), [rng.normal(size=(4, 3)), rng.normal(size=3)])


def test_scalar_operand():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = 3.0 * x + 1.0
    T.backward(T.sum(y))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_shape_mismatch_and_domain_errors():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))
    with pytest.raises(DomainError):
        T.log(T.Tensor([-1.0]))
    with pytest.raises(DomainError):
        T.sqrt(T.Tensor([-1.0]))


def test_reductions():
    x = T.Tensor([[1.0, 3.0], [5.0, 7.0]])
    np.testing.assert_array_equal(T.mean(x, axis=0).data, [3.0, 5.0])
    const = T.Tensor(np.full((1, 6), 2.0))
    assert T.stddev(const, axis=1).item() == pytest.approx(1e-5, rel=1e-9)
    with pytest.raises(DimensionError):
        T.sum(x, axis=2)
    with pytest.raises(DimensionError):
        T.stddev(T.Tensor(np.ones((1, 3))), axis=0)


def test_reduction_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=6)
    _check_grad(lambda t: T.sum(T.mul(T.stddev(t, axis=0), w)), [x])
    _check_grad(lambda t: T.sum(T.square(T.mean(t, axis=1))), [x])
    _check_grad(lambda t: T.sum(T.square(T.sum(t, axis=0, keepdims=True))), [x])


def test_concat_slice():
    a = T.Tensor([[1.0, 2.0]])
    b = T.Tensor([[3.0, 4.0]])
    assert T.concat([a, b], axis=1).data.tolist() == [[1, 2, 3, 4]]
    x = T.Tensor(np.arange(12.0).reshape(3, 4))
    back = T.concat([T.slice(x, 1, 0, 1), T.slice(x, 1, 1, 4)], axis=1)
    np.testing.assert_array_equal(back.data, x.data)
    with pytest.raises(DimensionError):
        T.slice(x, 1, 2, 5)
    with pytest.raises(DimensionError):
        T.concat([a, T.Tensor(np.ones((2, 3)))], axis=1)


def test_slice_gradient_is_indicator():
    x = T.Tensor(np.arange(10.0), requires_grad=True)
    T.backward(T.sum(T.slice(x, 0, 3, 7)))
    np.testing.assert_array_equal(x.grad, [0, 0, 0, 1, 1, 1, 1, 0, 0, 0])


def test_batchnorm_train_and_eval():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 30.0, size=(8, 5))  # var >> eps, so var(xhat) = 1 - eps/var
    stats = T.BatchNormStats.fresh(5)
    y = T.batchnorm(T.Tensor(x), T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)), stats, train=True)
    np.testing.assert_allclose(y.data.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.data.var(axis=0), 1.0, atol=1e-6)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=0))
    ident = T.batchnorm(T.Tensor(x), T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)),
                        T.BatchNormStats.fresh(5), train=False)
    np.testing.assert_allclose(ident.data, x / np.sqrt(1 + 1e-5))
    with pytest.raises(BatchSizeError):
        T.batchnorm(T.Tensor(x[:1]), T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)), stats, train=True)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3))
    gamma = rng.uniform(0.5, 1.5, size=3)
    beta = rng.normal(size=3)
    w = rng.normal(size=(6, 3))
    stats = T.BatchNormStats(rng.normal(size=3), rng.uniform(0.5, 2, size=3))

    def build(xt, gt, bt):
        s = T.BatchNormStats(stats.mean.copy(), stats.var.copy())
        return T.sum(T.mul(T.batchnorm(xt, gt, bt, s, train=train), w))

    _check_grad(build, [x, gamma, beta])


def test_backward_seeds_and_simple_grads():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(T.square(x)))
    np.testing.assert_array_equal(x.grad, [2, 4, 6])
    with pytest.raises(ContractError):
        T.backward(T.square(x))


def test_two_backward_passes_accumulate():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    loss = T.sum(T.tanh(T.matmul(x, w)))
    T.backward(loss)
    g1 = x.grad.copy()
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * g1)


def test_tape_visits_each_node_once_in_topological_order():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, y)
    loss = T.sum(z)
    tape = T.Tape.record(loss)
    ids = [n.node_id for n in tape.nodes]
    assert len(ids) == len(set(ids)) == 4
    pos = {n.node_id: i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            assert pos[p.node_id] < pos[n.node_id]
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [4, 4, 4])


def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(NumericError):
            with np.errstate(over="ignore"):
                T.exp(T.Tensor([1000.0]))
    finally:
        T.set_debug(False)


def test_composed_network_gradient():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 4))
    w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    b1 = rng.normal(size=6)

    def build(w1t, b1t, w2t):
        h = T.tanh(T.add(T.matmul(T.Tensor(x), w1t), b1t))
        h = T.concat([T.mean(h, axis=0, keepdims=True), T.stddev(h, axis=0, keepdims=True)], axis=0)
        return T.sum(T.log_softmax(T.matmul(h, w2t), axis=1))

    _check_grad(build, [w1, b1, w2], tol=1e-3)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_forward_is_deterministic(values):
    a = T.Tensor(np.array(values))
    out1 = T.stddev(T.reshape(T.sigmoid(a), (1, -1)), axis=1).data
    out2 = T.stddev(T.reshape(T.sigmoid(a), (1, -1)), axis=1).data
    assert out1.tobytes() == out2.tobytes()


def test_take_gathers_and_accumulates():
    rng = np.random.default_rng(40)
    x = rng.normal(size=(4, 3))
    rows = [0, 2, 0, 3, 3, 3]
    w = rng.normal(size=(6, 3))
    leaf = T.Tensor(x, requires_grad=True)
    out = T.take(leaf, rows)
    np.testing.assert_array_equal(out.data, x[rows])
    T.backward(T.sum(T.mul(out, w)))
    num = numeric_grad(lambda: float(np.sum(x[rows] * w)), x)
    assert rel_err(leaf.grad, num) < 1e-6
    with pytest.raises(DimensionError):
        T.take(leaf, [4])
