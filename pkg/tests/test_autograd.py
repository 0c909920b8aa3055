import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sssle.autograd import Tensor, concat, sigmoid, stack

from fdcheck import central_difference, rel_error


def grad_of(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad for t in ts]


def numeric_grad(fn, *arrays):
    arrays = [a.copy() for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            g.reshape(-1)[i] = central_difference(lambda: fn(*[Tensor(b) for b in arrays]).item(), flat, i)
        out.append(g)
    return out


def assert_grads(fn, *arrays, tol=1e-6):
    for ga, gn in zip(grad_of(fn, *arrays), numeric_grad(fn, *arrays)):
        assert np.max(rel_error(ga, gn)) < tol


rng = np.random.default_rng(0)
A = rng.standard_normal((3, 4))
B = rng.standard_normal((4, 2))
ROW = rng.standard_normal((1, 4))
POS = rng.uniform(0.5, 2.0, (3, 4))

CASES = {
    "add_broadcast": (lambda a, r: ((a + r) * (a + r)).sum(), (A, ROW)),
    "sub": (lambda a, r: ((a - r) * (a - r)).sum(), (A, ROW)),
    "mul_broadcast": (lambda a, r: (a * r).sum(), (A, ROW)),
    "div": (lambda a, p: (a / p).sum(), (A, POS)),
    "matmul": (lambda a, b: ((a @ b) * (a @ b)).sum(), (A, B)),
    "relu": (lambda a: (a.relu() * a).sum(), (A,)),
    "sigmoid": (lambda a: a.sigmoid().sum(), (A,)),
    "exp": (lambda a: a.exp().sum(), (A,)),
    "log": (lambda p: p.log().sum(), (POS,)),
    "softplus": (lambda a: a.softplus().sum(), (A * 5,)),
    "mean_axis": (lambda a: (a.mean(axis=1) * a.mean(axis=1)).sum(), (A,)),
    "max_axis": (lambda a: a.max(axis=1).sum(), (A,)),
    "reshape_transpose": (lambda a, b: (a.reshape(2, 6).transpose() @ Tensor(np.ones((2, 1)))).sum() + b.sum(), (A, B)),
    "getitem": (lambda a: (a[1:, ::2] * a[1:, ::2]).sum(), (A,)),
    "concat": (lambda a, r: (concat([a, r], axis=0) * concat([a, r], axis=0)).sum(), (A, ROW)),
    "stack": (lambda a, p: (stack([a, p], axis=1) * stack([a, p], axis=1)).sum(), (A, POS)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    fn, arrays = CASES[name]
    assert_grads(fn, *arrays)


def test_reused_node_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    x.relu().sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_max_routes_to_first_argmax():
    x = Tensor(np.array([[2.0, 5.0, 5.0]]), requires_grad=True)
    x.max(axis=1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (Tensor(np.ones(3), requires_grad=True) * 2).backward()


def test_constants_get_no_gradient():
    c = Tensor(np.ones(3))
    x = Tensor(np.ones(3), requires_grad=True)
    (c * x).sum().backward()
    assert c.grad is None and x.grad is not None


def test_sigmoid_and_softplus_extremes_are_finite():
    x = np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[-1] == 1.0
    sp = Tensor(x).softplus().data
    np.testing.assert_allclose(sp[[0, 2, 4]], [0.0, np.log(2.0), 1000.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_composite_graph(seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((5, 3))
    x = r.standard_normal((4, 5))

    def f(w_, x_):
        h = (x_ @ w_).sigmoid()
        return (h * h).mean() + (x_ @ w_).softplus().sum(axis=0).max(axis=0)

    assert_grads(f, w, x, tol=1e-5)
