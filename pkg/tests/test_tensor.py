import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splashlab import tensor as T
from splashlab.tensor import Graph, GraphError, NonFiniteError, Parameter, ShapeError, Tensor


def central_diff(f, arrays, which, index, step=1e-5):
    arr = arrays[which]
    old = arr[index]
    arr[index] = old + step
    fp = f(*arrays)
    arr[index] = old - step
    fm = f(*arrays)
    arr[index] = old
    return (fp - fm) / (2 * step)


def check_primitive(op, inputs, n_points=100, tol=1e-5, seed=0):
    """Analytic vs central-difference gradients of sum(op(*inputs) * W) at random coordinates.

    Relative error uses max(|a|, |n|, 1e-3) as the denominator so that
    coordinates with a vanishing gradient are judged on absolute error.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out_shape = op(*[Tensor(a) for a in inputs]).shape
    weights = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    ts = [Tensor(a, requires_grad=True) for a in inputs]
    with Graph() as g:
        loss = (op(*ts) * Tensor(weights)).sum()
        grads = g.backward(loss)
    worst = 0.0
    for _ in range(n_points):
        which = int(rng.integers(len(inputs)))
        index = tuple(int(rng.integers(s)) for s in inputs[which].shape)
        num = central_diff(scalar, inputs, which, index)
        ana = grads.get(ts[which], np.zeros_like(inputs[which]))[index]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-3))
    assert worst < tol, f"worst relative error {worst:.3g}"


def away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


# -- forward examples -------------------------------------------------------
def test_matmul_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_sum_of_product_example():
    assert T.sum_(T.mul(Tensor([1, 2, 3]), Tensor([4, 5, 6]))).item() == 32.0


# -- backward examples ------------------------------------------------------
def test_relu_subgradient_example():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    _, (gx,) = T.grad(lambda t: t.relu().sum(), x)
    np.testing.assert_array_equal(gx, [0.0, 1.0])


def test_relu_gradient_is_zero_at_kink():
    x = Tensor([0.0], requires_grad=True)
    _, (gx,) = T.grad(lambda t: t.relu().sum(), x)
    assert gx[0] == 0.0


def test_square_gradient_example():
    x = Tensor([3.0], requires_grad=True)
    _, (gx,) = T.grad(lambda t: (t * t).sum(), x)
    np.testing.assert_array_equal(gx, [6.0])


def test_sigmoid_gradient_example():
    x = Tensor(0.0, requires_grad=True)
    _, (gx,) = T.grad(lambda t: t.sigmoid(), x)
    assert gx == pytest.approx(0.25, abs=1e-15)


# -- per-primitive gradient checks -------------------------------------------
RNG = np.random.default_rng(123)


@pytest.mark.parametrize("name,op,inputs", [
    ("add", T.add, [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))]),
    ("add-broadcast", T.add, [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))]),
    ("sub", T.sub, [RNG.normal(size=(3, 4)), RNG.normal(size=(1, 4))]),
    ("mul", T.mul, [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))]),
    ("scalar-mul", lambda a: a * 2.5, [RNG.normal(size=(5,))]),
    ("div", T.div, [RNG.normal(size=(3, 4)), RNG.uniform(0.5, 2.0, size=(3, 4))]),
    ("power", lambda a: T.power(a, 3.0), [RNG.normal(size=(6,))]),
    ("sqrt", lambda a: T.power(a, 0.5), [RNG.uniform(0.5, 2.0, size=(6,))]),
    ("matmul", T.matmul, [RNG.normal(size=(4, 5)), RNG.normal(size=(5, 3))]),
    ("conv2d", T.conv2d, [RNG.normal(size=(2, 3, 7, 6)), RNG.normal(size=(4, 3, 3, 3)), RNG.normal(size=(4,))]),
    ("reshape", lambda a: T.reshape(a, (4, 3)), [RNG.normal(size=(3, 4))]),
    ("sum-axis", lambda a: T.sum_(a, axis=1), [RNG.normal(size=(3, 4))]),
    ("mean", lambda a: T.mean(a, axis=0, keepdims=True), [RNG.normal(size=(3, 4))]),
    ("relu", T.relu, [away_from_zero(RNG, (20,))]),
    ("abs", T.abs_, [away_from_zero(RNG, (20,))]),
    ("sign", lambda a: T.sign(a) * a, [away_from_zero(RNG, (20,))]),
    ("exp", T.exp, [RNG.normal(size=(10,))]),
    ("log", T.log, [RNG.uniform(0.2, 3.0, size=(10,))]),
    ("tanh", T.tanh, [RNG.normal(size=(10,))]),
    ("sigmoid", T.sigmoid, [RNG.normal(size=(10,))]),
    ("log_softmax", T.log_softmax, [RNG.normal(size=(4, 6))]),
])
def test_primitive_gradients(name, op, inputs):
    check_primitive(op, inputs)


def test_maxpool_gradient():
    rng = np.random.default_rng(5)
    # a permutation keeps every window's winner at least 1/size away from the runner-up
    x = rng.permutation(2 * 3 * 6 * 4).reshape(2, 3, 6, 4) / 10.0
    check_primitive(T.maxpool2x2, [x])


# -- errors -------------------------------------------------------------------
def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_conv_window_must_fit():
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        T.log(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_before_forward():
    x = Tensor([1.0], requires_grad=True)
    loss = (x * x).sum()            # computed outside any graph
    with Graph() as g:
        with pytest.raises(GraphError, match="before a forward"):
            g.backward(loss)


def test_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = x * x
        with pytest.raises(GraphError, match="scalar"):
            g.backward(y)


def test_graph_is_single_use():
    x = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        loss = (x * x).sum()
        g.backward(loss)
        with pytest.raises(GraphError):
            g.backward(loss)


# -- properties -----------------------------------------------------------------
def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=(5, 3)), name="w")
    x = rng.normal(size=(4, 5))

    def run():
        with Graph() as g:
            loss = T.log_softmax(T.matmul(Tensor(x), w).tanh()).sum()
            return g.backward(loss)[w].copy()

    assert np.array_equal(run(), run())


def test_backward_visits_nodes_in_reverse_recording_order():
    visits = []

    def logged(tag, a):
        def vjp(g):
            visits.append(tag)
            return (g,)
        return T.primitive(tag, a.data.copy(), (a,), vjp)

    x = Tensor([2.0], requires_grad=True)
    with Graph() as g:
        y = logged("first", x)
        z = logged("second", y)
        loss = logged("third", z).sum()
        assert [n.op for n in g.nodes] == ["first", "second", "third", "sum"]
        g.backward(loss)
    assert visits == ["third", "second", "first"]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_backward_is_linear(a, b):
    """grad(sum(f) + sum(g)) == grad(sum(f)) + grad(sum(g))."""
    def f(t):
        return (t.tanh() * Tensor(a)).sum()

    def h(t):
        return (t.sigmoid() * Tensor(b)).sum()

    x0 = np.linspace(-1, 1, 12).reshape(3, 4)
    _, (g_both,) = T.grad(lambda t: f(t) + h(t), Tensor(x0, requires_grad=True))
    _, (g_f,) = T.grad(f, Tensor(x0, requires_grad=True))
    _, (g_h,) = T.grad(h, Tensor(x0, requires_grad=True))
    np.testing.assert_allclose(g_both, g_f + g_h, rtol=1e-12, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 4)), st.booleans())
def test_broadcast_gradient_has_operand_shape(shape, row):
    a = Tensor(np.ones(shape), requires_grad=True)
    b = Tensor(np.ones((1, shape[1]) if row else (shape[0], 1)), requires_grad=True)
    with Graph() as g:
        grads = g.backward((a * b).sum())
    assert grads[a].shape == a.shape
    assert grads[b].shape == b.shape
    assert grads[b].sum() == pytest.approx(a.size)


def test_no_recording_outside_graph():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_tensor_data_is_float64_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.size == int(np.prod(t.shape))
