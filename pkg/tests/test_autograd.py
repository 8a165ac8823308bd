import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlnlab import autograd as ag
from dlnlab.autograd import Tensor, backward, get_tape, parameter
from dlnlab.exceptions import NotScalar, ShapeMismatch
from gradcheck import check_gradients

TOL = 1e-5


@pytest.fixture(autouse=True)
def fresh_tape():
    get_tape().clear()
    yield
    get_tape().clear()


def rand(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
    return parameter(x)


def reduce_weighted(t, rng):
    """Scalar from an arbitrary tensor with non-uniform upstream gradient."""
    w = rng.normal(size=t.shape)
    return ag.sum_(ag.mul(t, w))


def case(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    w = lambda t: reduce_weighted(t, np.random.default_rng(7))  # noqa: E731
    if name == "matmul":
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        return [a, b], lambda: w(a @ b)
    if name == "batched_matmul":
        a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
        return [a, b], lambda: w(a @ b)
    if name == "batched_matmul_both":
        a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 3)
        return [a, b], lambda: w(a @ b)
    if name == "add_bias":
        a, b = rand(rng, 3, 4), rand(rng, 4)
        return [a, b], lambda: w(a + b)
    if name == "sub":
        a, b = rand(rng, 3, 4), rand(rng, 3, 1)
        return [a, b], lambda: w(a - b)
    if name == "mul":
        a, b = rand(rng, 3, 4), rand(rng, 3, 4)
        return [a, b], lambda: w(a * b)
    if name == "concat":
        a, b = rand(rng, 3, 2), rand(rng, 3, 4)
        return [a, b], lambda: w(ag.concat([a, b], axis=1))
    if name == "stack":
        a, b = rand(rng, 3, 2), rand(rng, 3, 2)
        return [a, b], lambda: w(ag.stack([a, b], axis=1))
    if name == "slice":
        a = rand(rng, 4, 5)
        return [a], lambda: w(a[1:3, ::2])
    if name == "fancy_index":
        a = rand(rng, 4, 5)
        return [a], lambda: w(a[np.array([0, 2, 2]), 1:])
    if name == "embedding":
        t = rand(rng, 6, 3)
        return [t], lambda: w(ag.embedding(t, [[1, 4, 1], [0, 5, 5]]))
    if name == "softmax":
        a = rand(rng, 3, 5)
        return [a], lambda: w(ag.softmax(a))
    if name == "log_softmax":
        a = rand(rng, 3, 5)
        return [a], lambda: w(ag.log_softmax(a))
    if name == "relu":
        a = rand(rng, 4, 4, away_from_zero=True)
        return [a], lambda: w(ag.relu(a))
    if name == "tanh":
        a = rand(rng, 4, 4)
        return [a], lambda: w(ag.tanh(a))
    if name == "sigmoid":
        a = rand(rng, 4, 4)
        return [a], lambda: w(ag.sigmoid(a))
    if name == "layer_norm":
        a, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
        return [a, g, b], lambda: w(ag.layer_norm(a, g, b))
    if name == "mean_axis":
        a = rand(rng, 3, 4, 2)
        return [a], lambda: w(ag.mean(a, axis=1))
    if name == "sum_axis_keepdims":
        a = rand(rng, 3, 4)
        return [a], lambda: w(ag.sum_(a, axis=0, keepdims=True))
    if name == "abs":
        a = rand(rng, 4, 4, away_from_zero=True)
        return [a], lambda: w(ag.abs_(a))
    if name == "square":
        a = rand(rng, 4, 3)
        return [a], lambda: w(ag.square(a))
    if name == "reshape_transpose":
        a = rand(rng, 2, 3, 4)
        return [a], lambda: w(ag.transpose(a.reshape(6, 4), (1, 0)))
    if name == "log":
        a = parameter(rng.uniform(0.5, 2.0, size=(3, 3)))
        return [a], lambda: w(ag.log(a))
    if name == "mse_loss":
        a = rand(rng, 5, 3)
        tgt = rng.normal(size=(5, 3))
        return [a], lambda: ag.mse_loss(a, tgt)
    if name == "cross_entropy":
        a = rand(rng, 4, 6)
        return [a], lambda: ag.cross_entropy(a, [0, 5, 2, 2])
    if name == "cross_entropy_masked":
        a = rand(rng, 2, 3, 6)
        return [a], lambda: ag.cross_entropy(a, [[0, 1, 2], [3, 4, 0]], weights=[[1, 1, 0], [1, 0, 0]])
    if name == "composite":
        x, W1, b1, W2 = rand(rng, 4, 3), rand(rng, 3, 5), rand(rng, 5), rand(rng, 5, 2)
        return [x, W1, b1, W2], lambda: ag.mean(ag.square(ag.tanh(x @ W1 + b1) @ W2)) + ag.sum_(ag.sigmoid(x))
    raise KeyError(name)


OP_NAMES = [
    "matmul", "batched_matmul", "batched_matmul_both", "add_bias", "sub", "mul", "concat", "stack",
    "slice", "fancy_index", "embedding", "softmax", "log_softmax", "relu", "tanh", "sigmoid",
    "layer_norm", "mean_axis", "sum_axis_keepdims", "abs", "square", "reshape_transpose", "log",
    "mse_loss", "cross_entropy", "cross_entropy_masked", "composite",
]


@pytest.mark.parametrize("name", OP_NAMES)
def test_gradients_match_finite_differences(name):
    params, fn = case(name)
    assert check_gradients(fn, params) <= TOL


def test_softmax_examples():
    y = ag.softmax(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(y.data, [[1 / 3] * 3], atol=1e-15)
    rng = np.random.default_rng(0)
    big = ag.softmax(Tensor(rng.normal(scale=50, size=(20, 9))))
    assert np.all(np.abs(big.data.sum(axis=1) - 1.0) <= 1e-12)


def test_matmul_identity_and_shape_errors():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    with pytest.raises(ShapeMismatch) as exc:
        a @ a
    assert "(2, 3)" in str(exc.value)
    with pytest.raises(ShapeMismatch):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 3)))


def test_abs_subgradient():
    x = parameter([2.0, -3.0, 0.0])
    backward(ag.sum_(ag.abs_(x)))
    np.testing.assert_array_equal(x.grad, [1.0, -1.0, 0.0])


def test_backward_examples():
    x = parameter(3.0)
    y = parameter(1.0)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)
    assert y.grad == 0.0
    with pytest.raises(NotScalar):
        backward(parameter([1.0, 2.0]) * 2.0)


def test_mse_examples():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(4, 3))
    assert ag.mse_loss(Tensor(p), p).item() == 0.0
    assert ag.mse_loss(Tensor(p + 0.5), p).item() == pytest.approx(0.25, abs=1e-15)
    t = rng.normal(size=(4, 3))
    brute = sum((p[i, j] - t[i, j]) ** 2 for i in range(4) for j in range(3)) / 12
    assert ag.mse_loss(Tensor(p), t).item() == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        ag.mse_loss(Tensor(p), t[:2])


def test_cross_entropy_examples():
    V = 7
    assert ag.cross_entropy(Tensor(np.zeros((3, V))), [0, 3, 6]).item() == pytest.approx(np.log(V), abs=1e-15)
    logits = np.full((2, V), -50.0)
    logits[0, 2] = logits[1, 5] = 50.0
    assert ag.cross_entropy(Tensor(logits), [2, 5]).item() < 1e-40
    rng = np.random.default_rng(5)
    z = rng.normal(size=(6, V))
    tgt = rng.integers(0, V, size=6)
    brute = np.mean([-z[i, tgt[i]] + np.log(np.sum(np.exp(z[i]))) for i in range(6)])
    assert ag.cross_entropy(Tensor(z), tgt).item() == pytest.approx(brute, abs=1e-10)
    with pytest.raises(IndexError):
        ag.cross_entropy(Tensor(z), [V] * 6)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 3, 4)
    W = rng.normal(size=(4, 2))

    def l1():
        return ag.sum_(ag.tanh(x @ Tensor(W)))

    def l2():
        return ag.mean(ag.square(x))

    backward(l1())
    g1 = x.grad.copy()
    x.zero_grad()
    backward(l2())
    g2 = x.grad.copy()
    x.zero_grad()
    backward(l1() * a + l2() * b)
    np.testing.assert_allclose(x.grad, a * g1 + b * g2, atol=1e-12)


def test_gradients_accumulate_until_zeroed():
    x = parameter(2.0)
    backward(x * x)
    backward(x * x)
    assert x.grad == pytest.approx(8.0)
    x.zero_grad()
    assert x.grad == 0.0


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with ag.no_grad():
        y = ag.tanh(x)
    assert len(get_tape()) == 0 and not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_rejected():
    with pytest.raises(FloatingPointError):
        ag.mul(Tensor([1e300]), Tensor([1e300]))


def test_tape_cleared_outputs_are_constants():
    x = parameter(np.ones(2))
    y = ag.tanh(x)
    get_tape().clear()
    assert not y.requires_grad and y._node is None
