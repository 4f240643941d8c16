import numpy as np
import pytest

from crowdflow import autograd as ag
from crowdflow.autograd import Tensor, numerical_grad, relative_error

R = np.random.default_rng(7)


def leaf(*shape, lo=-1.0, hi=1.0):
    return Tensor(R.uniform(lo, hi, size=shape), requires_grad=True)


# one scalar-valued probe per registered op: returns (leaves, fn building the output)
CASES = {
    "add": lambda: ((a := leaf(3, 4), b := leaf(4)), lambda: ag.add(a, b)),
    "sub": lambda: ((a := leaf(3, 1), b := leaf(3, 4)), lambda: ag.sub(a, b)),
    "mul": lambda: ((a := leaf(2, 3), b := leaf(1, 3)), lambda: ag.mul(a, b)),
    "div": lambda: ((a := leaf(2, 3), b := leaf(2, 3, lo=0.5, hi=2.0)), lambda: ag.div(a, b)),
    "neg": lambda: ((a := leaf(5),), lambda: ag.neg(a)),
    "square": lambda: ((a := leaf(5),), lambda: ag.square(a)),
    "sqrt": lambda: ((a := leaf(5, lo=0.5, hi=2.0),), lambda: ag.sqrt(a)),
    "exp": lambda: ((a := leaf(5),), lambda: ag.exp(a)),
    "log": lambda: ((a := leaf(5, lo=0.5, hi=2.0),), lambda: ag.log(a)),
    "tanh": lambda: ((a := leaf(5),), lambda: ag.tanh(a)),
    "sigmoid": lambda: ((a := leaf(6, lo=-30, hi=30),), lambda: ag.sigmoid(a)),
    "matmul": lambda: ((a := leaf(2, 3, 4), b := leaf(4, 5)), lambda: ag.matmul(a, b)),
    "sum": lambda: ((a := leaf(3, 4),), lambda: ag.tsum(a, axis=1)),
    "mean": lambda: ((a := leaf(3, 4, 2),), lambda: ag.mean(a, axis=(0, 2), keepdims=True)),
    "reshape": lambda: ((a := leaf(3, 4),), lambda: ag.reshape(a, (2, 6))),
    "transpose": lambda: ((a := leaf(2, 3, 4),), lambda: ag.transpose(a, (2, 0, 1))),
    "concat": lambda: ((a := leaf(2, 3), b := leaf(2, 2)), lambda: ag.concat([a, b], axis=1)),
    "getitem": lambda: ((a := leaf(5, 3),), lambda: ag.getitem(a, np.array([0, 2, 2, 4]))),
    "segment_sum": lambda: ((a := leaf(6, 2),), lambda: ag.segment_sum(a, np.array([0, 2, 2, 1, 0, 2]), 4)),
    "softmax": lambda: ((a := leaf(3, 5),), lambda: ag.softmax(a, axis=-1)),
    "layer_norm": lambda: ((a := leaf(3, 6),), lambda: ag.layer_norm(a)),
    "clip": lambda: ((a := leaf(8, lo=-2, hi=2),), lambda: ag.clip(a, -0.7, 0.9)),
    "minimum": lambda: ((a := leaf(4, 3), b := leaf(4, 3)), lambda: ag.minimum(a, b)),
}


def test_every_registered_op_has_a_case():
    assert set(CASES) == set(ag.OPS)


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradient_matches_central_differences(name):
    leaves, build = CASES[name]()
    out = build()
    w = R.normal(size=out.shape)           # random cotangent makes the check non-trivial
    loss = lambda: float((build().data * w).sum())
    for t in leaves:
        t.grad = None
    ag.tsum(ag.mul(build(), w)).backward()
    for t in leaves:
        num = numerical_grad(loss, t.data)
        assert relative_error(t.grad, num) < 1e-6, name


def test_shared_subexpression_accumulates():
    a = leaf(3)
    y = ag.mul(a, a) + a
    ag.tsum(y).backward()
    assert np.allclose(a.grad, 2 * a.data + 1)


def test_backward_requires_scalar_without_seed():
    a = leaf(3)
    with pytest.raises(ValueError):
        ag.tanh(a).backward()


def test_constants_get_no_graph():
    out = ag.add(Tensor(np.ones(2)), np.ones(2))
    assert not out.requires_grad and out._parents == ()


def test_ndarray_on_the_left_dispatches_to_tensor():
    a = leaf(3)
    out = np.arange(3.0) * a
    assert isinstance(out, Tensor)
    ag.tsum(out).backward()
    assert np.array_equal(a.grad, np.arange(3.0))


def test_sigmoid_is_stable_for_large_inputs():
    out = ag.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
    assert np.array_equal(out.data, [0.0, 0.5, 1.0])


def test_matmul_rejects_vectors():
    with pytest.raises(ValueError):
        ag.matmul(leaf(3), leaf(3, 2))
