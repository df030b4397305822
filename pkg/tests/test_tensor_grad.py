"""Central finite differences against every backward rule.

Inputs drawn from [-2, 2] (shifted for log / away from kinks for relu),
eps = 1e-5, max relative error < 1e-4 as required of every differentiable op.
"""

import numpy as np

from scalefuse.gradcheck import central_diff, rel_error
from scalefuse.tensor import (
    Tensor,
    concat,
    conv2d,
    cross_entropy,
    div,
    downsample_nearest,
    gather_rows,
    matmul,
    mul,
    slice_axis,
    straight_through,
    upsample_nearest,
)

EPS = 1e-5
TOL = 1e-4


def fd_check(build, arrays, tol=TOL, samples=12, seed=0):
    """build(list of Tensors) -> scalar Tensor; verifies each array's grad."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()

    def f():
        fresh = [Tensor(t.data, requires_grad=True) for t in tensors]
        for ft, src in zip(fresh, tensors):
            ft.data[...] = src.data
        return build(tensors).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None
        g = t.grad.reshape(-1)
        idxs = rng.choice(t.data.size, size=min(samples, t.data.size), replace=False)
        for i in idxs:
            fd = central_diff(f, t.data, int(i), EPS)
            worst = max(worst, rel_error(float(g[i]), fd, floor=1e-4))
    assert worst < tol, f"max rel err {worst:.3e}"


def rand(*shape, seed=0, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def test_add_mul_div_scale():
    fd_check(lambda ts: (ts[0] + ts[1]).sum(), [rand(4, 3, seed=1), rand(4, 3, seed=2)])
    fd_check(lambda ts: mul(ts[0], ts[1]).sum(), [rand(4, 3, seed=3), rand(4, 3, seed=4)])
    fd_check(lambda ts: div(ts[0], ts[1]).sum(),
             [rand(4, 3, seed=5), rand(4, 3, seed=6, lo=0.5, hi=2.0)])
    fd_check(lambda ts: (ts[0] * -1.7).sum(), [rand(5, seed=7)])


def test_add_mul_broadcast():
    fd_check(lambda ts: (ts[0] + ts[1]).sum(), [rand(4, 3, seed=8), rand(3, seed=9)])
    fd_check(lambda ts: mul(ts[0], ts[1]).sum(), [rand(2, 4, 3, seed=10), rand(1, 1, 3, seed=11)])


def test_matmul_2d_tight():
    # linear op: finite differences are exact to roundoff
    fd_check(lambda ts: matmul(ts[0], ts[1]).sum(),
             [rand(5, 7, seed=12), rand(7, 3, seed=13)], tol=1e-6)


def test_matmul_weighted_output():
    w = rand(5, 3, seed=14)
    fd_check(lambda ts: (matmul(ts[0], ts[1]) * Tensor(w)).sum(),
             [rand(5, 7, seed=15), rand(7, 3, seed=16)], tol=1e-6)


def test_matmul_batched():
    fd_check(lambda ts: matmul(ts[0], ts[1]).exp().mean(),
             [rand(3, 2, 4, seed=17) * 0.3, rand(3, 4, 2, seed=18) * 0.3])


def test_pointwise():
    fd_check(lambda ts: ts[0].exp().sum(), [rand(4, 4, seed=19)])
    fd_check(lambda ts: ts[0].log().sum(), [rand(4, 4, seed=20, lo=0.3, hi=2.0)])
    fd_check(lambda ts: ts[0].gelu().sum(), [rand(4, 4, seed=21)])
    x = rand(4, 4, seed=22)
    x[np.abs(x) < 0.05] += 0.1  # keep away from the relu kink
    fd_check(lambda ts: ts[0].relu().sum(), [x])


def test_softmax_axes():
    w0 = rand(5, 4, seed=23)
    fd_check(lambda ts: (ts[0].softmax(axis=0) * Tensor(w0)).sum(), [rand(5, 4, seed=24)])
    w1 = rand(3, 4, 2, seed=25)
    fd_check(lambda ts: (ts[0].softmax(axis=-1) * Tensor(w1)).sum(), [rand(3, 4, 2, seed=26)])


def test_reductions():
    fd_check(lambda ts: mul(ts[0].mean(axis=0), Tensor(rand(5, seed=27))).sum(), [rand(3, 5, seed=28)])
    fd_check(lambda ts: mul(ts[0].sum(axis=1), Tensor(rand(3, seed=29))).sum(), [rand(3, 5, seed=30)])
    fd_check(lambda ts: ts[0].mean(), [rand(4, 2, seed=31)])


def test_shape_ops():
    w = rand(6, 2, seed=32)
    fd_check(lambda ts: (ts[0].reshape(6, 2) * Tensor(w)).sum(), [rand(3, 4, seed=33)])
    w2 = rand(4, 3, seed=34)
    fd_check(lambda ts: (ts[0].transpose() * Tensor(w2)).sum(), [rand(3, 4, seed=35)])
    fd_check(lambda ts: (ts[0].transpose(2, 0, 1)).exp().mean(), [rand(2, 3, 4, seed=36) * 0.5])


def test_concat_slice_gather():
    w = rand(7, 3, seed=37)
    fd_check(lambda ts: (concat([ts[0], ts[1]], axis=0) * Tensor(w)).sum(),
             [rand(4, 3, seed=38), rand(3, 3, seed=39)])
    fd_check(lambda ts: slice_axis(ts[0], 1, 1, 3).exp().sum(), [rand(4, 5, seed=40) * 0.5])
    idx = [0, 2, 2, 1]
    w3 = rand(4, 3, seed=41)
    fd_check(lambda ts: (gather_rows(ts[0], idx) * Tensor(w3)).sum(), [rand(3, 3, seed=42)])


def test_spatial_ops():
    fd_check(lambda ts: conv2d(ts[0], ts[1], stride=1, pad=1).gelu().sum(),
             [rand(2, 5, 5, seed=43), rand(3, 2, 3, 3, seed=44) * 0.5])
    fd_check(lambda ts: conv2d(ts[0], ts[1], stride=2, pad=0).sum(),
             [rand(2, 6, 6, seed=45), rand(3, 2, 2, 2, seed=46)], tol=1e-6)
    fd_check(lambda ts: upsample_nearest(ts[0], 2).exp().sum(), [rand(2, 3, 3, seed=47) * 0.4])
    fd_check(lambda ts: downsample_nearest(ts[0], 2).exp().sum(), [rand(2, 4, 4, seed=48) * 0.4])


def test_upsample_gradient_is_factor_squared():
    x = Tensor(rand(1, 2, 2, seed=49), requires_grad=True)
    upsample_nearest(x, 4).sum().backward()
    assert np.array_equal(x.grad, np.full((1, 2, 2), 16.0))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(50)
    logits = rng.uniform(-2, 2, size=(3, 4, 4))
    labels = rng.integers(0, 3, size=(4, 4))
    labels[0, :2] = 255
    fd_check(lambda ts: cross_entropy(ts[0], labels, ignore_index=255), [logits])


def test_straight_through_routes_gradient_to_soft():
    soft = Tensor(rand(6, seed=51), requires_grad=True)
    hard = (soft.data > 0).astype(float)
    out = straight_through(hard, soft)
    (out * Tensor(np.arange(6.0))).sum().backward()
    assert np.array_equal(soft.grad, np.arange(6.0))


def test_gradients_accumulate_across_shared_use():
    a = Tensor(rand(3, 3, seed=52), requires_grad=True)
    ((a * a) + matmul(a, a)).sum().backward()
    fd = np.zeros_like(a.data)

    def f():
        return float((a.data * a.data + a.data @ a.data).sum())

    for i in range(a.data.size):
        fd.reshape(-1)[i] = central_diff(f, a.data, i, EPS)
    assert np.max(np.abs(a.grad - fd)) < 1e-6
