import numpy as np
import pytest

from nextloc.autodiff import Tensor, concat, layer_norm, take_rows


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f(x)
        x[idx] = orig - eps
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def check(build, *shapes, seed=0):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()
    for i, a in enumerate(arrays):
        def f(v, i=i):
            vals = [Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
            return float(build(*vals).data)
        assert np.allclose(leaves[i].grad, numeric_grad(f, a), rtol=1e-5, atol=1e-7)


def test_broadcast_add_mul():
    check(lambda a, b: ((a + b) * a).sum(), (3, 4), (4,))


def test_batched_matmul_with_shared_weight():
    check(lambda a, w: (a @ w).tanh().sum(), (2, 3, 4), (4, 5))


def test_softmax_and_gelu():
    check(lambda a: (a.softmax(axis=-1) * a.gelu()).sum(), (3, 6))


def test_layer_norm():
    check(lambda x, g, b: (layer_norm(x, g, b) * x).sum(), (2, 3, 5), (5,), (5,))


def test_take_rows_accumulates_repeats():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    take_rows(table, np.array([[0, 2], [2, 2]])).sum().backward()
    assert np.array_equal(table.grad, [[1, 1], [0, 0], [3, 3]])


def test_concat_slice_reshape_transpose():
    check(lambda a, b: (concat([a, b], axis=1)[:, 1:] * concat([a, b], axis=1)[:, 1:] + 1.0).reshape(2, -1).transpose(1, 0).sqrt().mean(), (2, 2), (2, 3), seed=3)


def test_constants_do_not_build_a_graph():
    a = Tensor(np.ones(3))
    out = a * 2.0 + 1.0
    assert not out.requires_grad and out._parents == ()


def test_backward_needs_scalar_seed():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()
