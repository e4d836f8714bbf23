"""Per-op and composite finite-difference checks for the reverse-mode tape."""

import numpy as np

from graspsynth import autodiff as ad

from util import rel_err


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check(build, shape, seed, tol=1e-6):
    """build(leaf) -> scalar Node; compares tape gradient to FD."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=shape)
    leafs = ad.leaf(x0)
    out = build(leafs)
    grads = ad.backward(out)
    g = grads[id(leafs)]

    def f(x):
        return float(build(ad.leaf(x)).value)

    assert rel_err(g, fd_grad(f, x0.copy())) < tol


def test_arithmetic_ops():
    check(lambda x: ad.asum(x * x + 2.0 * x - 0.5), (4, 3), 0)
    check(lambda x: ad.asum(x / (x * x + 2.0)), (5,), 1)
    check(lambda x: ad.asum(-x + x * x * x), (3, 2), 2)


def test_broadcasting_unbroadcast():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(1, 3))
    check(lambda x: ad.asum(x * w), (4, 3), 4)
    check(lambda x: ad.asum(ad.asum(x, axis=0, keepdims=True) * x), (4, 3), 5)


def test_matmul():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 5))
    check(lambda x: ad.asum(ad.matmul(x, w)), (4, 3), 7)
    check(lambda x: ad.asum(ad.matmul(x, ad.swapaxes(x, 0, 1))), (4, 4), 8)
    # batched
    b = rng.normal(size=(6, 3, 2))
    check(lambda x: ad.asum(ad.matmul(x, b)), (6, 5, 3), 9)


def test_reductions():
    check(lambda x: ad.asum(ad.amax(x, axis=1)), (5, 4), 10)
    check(lambda x: ad.asum(ad.amin(x, axis=0)), (5, 4), 11)
    check(lambda x: ad.amean(ad.square(x)), (7,), 12)
    check(lambda x: ad.asum(ad.amax(x, axis=1, keepdims=True) * x), (3, 4), 13)


def test_elementwise_nonlinear():
    check(lambda x: ad.asum(ad.tanh(x) + ad.sin(x) * ad.cos(x)), (6,), 14)
    check(lambda x: ad.asum(ad.exp(x * 0.3)), (4,), 15)
    check(lambda x: ad.asum(ad.log(ad.exp(x) + 1.5)), (4,), 16)
    check(lambda x: ad.asum(ad.sqrt(x * x + 1.0)), (5,), 17)
    check(lambda x: ad.asum(ad.relu(x) * x), (20,), 18)
    check(lambda x: ad.asum(ad.maximum(x, 0.25) + ad.minimum(x, -0.25)), (20,), 19)


def test_shape_ops():
    check(lambda x: ad.asum(ad.reshape(x, (6, 2)) @ np.ones((2, 1))), (3, 4), 20)
    check(lambda x: ad.asum(ad.transpose(x, (1, 0, 2)) * 2.0), (2, 3, 4), 21)
    check(lambda x: ad.asum(ad.concatenate([x, x * 2.0], axis=0)), (3, 2), 22)
    check(lambda x: ad.asum(ad.stack([x, x * x], axis=1)), (4,), 23)
    check(lambda x: ad.asum(ad.square(x[1:3])), (5,), 24)


def test_gather_with_repeats():
    idx = np.array([[0, 0, 2], [1, 1, 1]])

    def build(x):
        g = ad.take_along(x, idx, axis=1)
        return ad.asum(ad.square(g))

    check(build, (2, 4), 25)


def test_cross():
    rng = np.random.default_rng(26)
    b = rng.normal(size=(5, 3))
    check(lambda x: ad.asum(ad.cross(x, b) * b[::-1]), (5, 3), 27)


def test_so3_coeffs():
    check(lambda x: ad.asum(ad.so3_a(ad.square(x))), (4,), 28)
    check(lambda x: ad.asum(ad.so3_b(ad.square(x))), (4,), 29)


def test_multi_use_accumulation():
    # a leaf feeding several consumers accumulates gradient contributions
    def build(x):
        y = x * 2.0
        return ad.asum(y) + ad.asum(ad.square(y)) + ad.asum(y * x)

    check(build, (3, 3), 30)


def test_constants_do_not_track():
    x = ad.leaf(np.ones(3))
    out = ad.asum(x + np.arange(3.0))
    grads = ad.backward(out)
    assert len(grads) == 3  # leaf, lifted sum input, output


def test_adam_descends_quadratic():
    target = np.array([1.0, -2.0, 3.0])
    p = ad.leaf(np.zeros(3))
    opt = ad.Adam([p], step_size=0.1)
    for _ in range(400):
        loss = ad.asum(ad.square(p - target))
        grads = ad.backward(loss)
        opt.step([grads[id(p)]])
    assert np.allclose(p.value, target, atol=1e-3)
