import numpy as np
import pytest

from deskvla import autodiff as ad
from deskvla.autodiff import GraphError, ShapeError, Tensor, grad_check, no_grad


def rng():
    return np.random.default_rng(0)


UNARY = {
    "exp": lambda x: ad.exp(x).sum(),
    "log": lambda x: ad.log(x * x + 1.0).sum(),
    "silu": lambda x: ad.silu(x).sum(),
    "softmax": lambda x: (ad.softmax(x) * Tensor(np.arange(20.0).reshape(4, 5))).sum(),
    "rms_norm": lambda x: (ad.rms_norm(x) * Tensor(np.linspace(-1, 1, 20).reshape(4, 5))).sum(),
    "transpose": lambda x: (x.transpose(1, 0) @ Tensor(np.ones((4, 2)))).sum(),
    "reshape_getitem": lambda x: (x.reshape(5, 4)[1:3] * x.reshape(5, 4)[[0, 4]]).sum(),
    "mean_axis": lambda x: (x.mean(axis=0) * x.sum(axis=0)).sum(),
    "concat": lambda x: ad.concat([x, x * x], axis=1).sum(),
    "cross_entropy": lambda x: ad.cross_entropy(x, np.array([0, 3, 4, 1])),
    "squared_error": lambda x: ad.squared_error(x, np.ones((4, 5)), np.array([1, 1, .5, .5, .5])),
    "masked_fill": lambda x: (ad.masked_fill(x, np.eye(4, 5, dtype=bool), 0.0) * x).sum(),
    "masked_softmax": lambda x: (ad.softmax(ad.masked_fill(x, np.triu(np.ones((4, 5), bool), 1), -np.inf))
                                 * Tensor(np.arange(20.0).reshape(4, 5))).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradients_match_central_differences(name):
    x = rng().standard_normal((4, 5))
    assert grad_check(UNARY[name], x) < 1e-6


def test_matmul_and_broadcast_gradients():
    r = rng()
    w = Tensor(r.standard_normal((3, 5, 2)))
    b = Tensor(r.standard_normal((2,)))
    assert grad_check(lambda x: ((x @ w) + b).exp().sum(), r.standard_normal((3, 4, 5))) < 1e-6
    a = Tensor(r.standard_normal((4, 5)))
    assert grad_check(lambda y: (a @ y).sum() * 0.5 + (y * y).sum(), r.standard_normal((5, 3))) < 1e-6


def test_embedding_gradient_accumulates_repeated_ids():
    table = Tensor(np.zeros((5, 3)), requires_grad=True)
    out = ad.embedding(table, np.array([1, 1, 4]))
    ad.backward(out.sum())
    assert np.array_equal(table.grad[:, 0], [0, 2, 0, 0, 1])


def test_ordered_matmul_matches_numpy_and_ignores_zero_padding():
    r = rng()
    x, y = r.standard_normal((3, 7, 6)), r.standard_normal((3, 6, 4))
    full = ad.matmul(Tensor(x), Tensor(y), ordered=True).data
    assert np.allclose(full, x @ y, atol=1e-12)
    xp = np.concatenate([x, np.zeros((3, 7, 3))], -1)
    yp = np.concatenate([y, r.standard_normal((3, 3, 4))], -2)
    assert np.array_equal(ad.matmul(Tensor(xp), Tensor(yp), ordered=True).data, full)
    assert np.array_equal(ad.matmul(Tensor(x[:, :2]), Tensor(y), ordered=True).data, full[:, :2])


def test_softmax_ignores_trailing_masked_entries_bitwise():
    x = rng().standard_normal((2, 5))
    short = ad.softmax(Tensor(x[:, :3])).data
    long = ad.softmax(Tensor(np.concatenate([x[:, :3], np.full((2, 2), -np.inf)], 1))).data
    assert np.array_equal(long[:, :3], short)
    assert np.all(long[:, 3:] == 0)


def test_shape_errors_are_descriptive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="broadcast"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))
    with pytest.raises(ShapeError):
        ad.cross_entropy(Tensor(np.ones((2, 3))), np.array([0, 1, 2]))
    with pytest.raises(ShapeError):
        ad.embedding(Tensor(np.ones((2, 3))), [2])


def test_second_backward_without_retain_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * x).sum()
    ad.backward(y)
    with pytest.raises(GraphError):
        ad.backward(y)


def test_retain_graph_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * x).sum()
    ad.backward(y, retain_graph=True)
    ad.backward(y)
    assert np.array_equal(x.grad, [4.0, 4.0, 4.0])


def test_backward_requires_scalar_and_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ad.backward(x * 2.0)
    with pytest.raises(GraphError):
        ad.backward(Tensor(np.ones(())))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    z = (x * 3.0).sum()
    assert z.requires_grad


def test_detach_blocks_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    y = (x.detach() * x).sum()
    ad.backward(y)
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_grad_check_reports_wrong_gradient():
    def bad(x):
        # forward value x^2 but a gradient of 1 flowing through the detached branch
        return (x.detach() * x).sum()

    assert grad_check(bad, np.array([1.0, 2.0])) > 0.1
