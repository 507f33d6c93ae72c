import numpy as np
import numpy.testing as npt
import pytest

from waveflow import autodiff as ad
from waveflow.autodiff import Jet, Tape
from waveflow.errors import NanPropagationError


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_var_scalar_chain():
    # check 1: gradient of a nested elementwise expression vs central differences
    rng = np.random.default_rng(0)
    w0 = rng.uniform(0.2, 1.5, size=7)

    def loss_np(w):
        return float(np.sum(np.exp(-w * w) + np.sin(w) * np.sqrt(w) / (1.0 + w)))

    tape = Tape()
    w = tape.leaf(w0)
    y = (ad.exp(-(w * w)) + ad.sin(w) * ad.sqrt(w) / (1.0 + w)).sum()
    tape.backward(y)
    npt.assert_allclose(w.grad, _fd_grad(loss_np, w0), atol=1e-7)

    # check 2: value agrees with plain numpy
    assert y.data == pytest.approx(loss_np(w0))


def test_var_matmul_grads():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    w0 = rng.normal(size=(3, 5))
    b0 = rng.normal(size=5)

    def loss_np(w, b):
        return float(np.tanh(x @ w + b).mean())

    # check 1: gradient through const @ var
    tape = Tape()
    w = tape.leaf(w0)
    b = tape.leaf(b0)
    y = ad.tanh(x @ w + b).mean()
    tape.backward(y)
    npt.assert_allclose(w.grad, _fd_grad(lambda v: loss_np(v, b0), w0), atol=1e-7)
    npt.assert_allclose(b.grad, _fd_grad(lambda v: loss_np(w0, v), b0), atol=1e-7)

    # check 2: batched (3d) @ 2d
    xb = rng.normal(size=(2, 4, 3))
    tape = Tape()
    w = tape.leaf(w0)
    y = ad.tanh(xb @ w).sum()
    tape.backward(y)
    fd = _fd_grad(lambda v: float(np.tanh(xb @ v).sum()), w0)
    npt.assert_allclose(w.grad, fd, atol=1e-6)


def test_var_structural_ops():
    rng = np.random.default_rng(2)
    a0 = rng.normal(size=(5, 8))
    idx = rng.integers(0, 8, size=(5, 3))

    # check 1: gather vjp equals finite differences
    def loss_np(a):
        return float((np.take_along_axis(a, idx, axis=-1) ** 2).sum())

    tape = Tape()
    a = tape.leaf(a0)
    y = (a.gather_last(idx) ** 2).sum()
    tape.backward(y)
    npt.assert_allclose(a.grad, _fd_grad(loss_np, a0), atol=1e-6)

    # check 2: pad/slice/flip are exact index bookkeeping
    tape = Tape()
    a = tape.leaf(a0)
    y = (a.pad_last(2, 1).slice_last(1, 9).flip_last() * 3.0).sum()
    tape.backward(y)
    g = np.zeros((5, 11))
    g[:, 1:9] = 3.0
    manual = g[:, 2:10]
    npt.assert_allclose(a.grad, manual, atol=0)

    # check 3: where routes gradient by mask
    cond = a0 > 0
    tape = Tape()
    a = tape.leaf(a0)
    y = ad.where(cond, a * 2.0, a * -1.0).sum()
    tape.backward(y)
    npt.assert_allclose(a.grad, np.where(cond, 2.0, -1.0), atol=0)

    # check 4: stack_last splits gradient back per slot
    tape = Tape()
    a = tape.leaf(a0[:, 0])
    b = tape.leaf(a0[:, 1])
    y = (ad.stack_last([a, b]) ** 2).sum()
    tape.backward(y)
    npt.assert_allclose(a.grad, 2 * a0[:, 0], atol=1e-12)
    npt.assert_allclose(b.grad, 2 * a0[:, 1], atol=1e-12)


def test_var_broadcast_accumulation():
    # gradient of broadcasting ops must sum over the broadcast axes
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(6, 4))
    c0 = rng.normal(size=(1, 4))
    tape = Tape()
    c = tape.leaf(c0)
    y = ((a0 + c) * (a0 * c)).sum()
    tape.backward(y)
    fd = _fd_grad(lambda v: float(((a0 + v) * (a0 * v)).sum()), c0)
    npt.assert_allclose(c.grad, fd, atol=1e-6)


def test_jet_composite_derivatives():
    # d1/d2 of h(x) = exp(sin(x^2)) / (1 + x^2) against analytic derivatives
    for x0 in [-1.3, -0.2, 0.7, 2.1]:
        j = Jet(x0, 1.0, 0.0)
        h = ad.exp(ad.sin(j * j)) / (1.0 + j * j)

        s = np.sin(x0 ** 2)
        c = np.cos(x0 ** 2)
        e = np.exp(s)
        den = 1.0 + x0 ** 2
        val = e / den
        d1 = e * c * 2 * x0 / den - e * 2 * x0 / den ** 2
        # second derivative assembled from the product/chain rule
        u = e
        u1 = e * c * 2 * x0
        u2 = e * (c * 2 * x0) ** 2 + e * (-s * (2 * x0) ** 2 + 2 * c)
        v = 1.0 / den
        v1 = -2 * x0 / den ** 2
        v2 = -2.0 / den ** 2 + 8 * x0 ** 2 / den ** 3
        d2 = u2 * v + 2 * u1 * v1 + u * v2

        npt.assert_allclose(h.f, val, atol=1e-14)
        npt.assert_allclose(h.d1, d1, atol=1e-12)
        npt.assert_allclose(h.d2, d2, atol=1e-11)


def test_jet_div_pow_sqrt():
    x0 = 0.8
    j = Jet(x0, 1.0, 0.0)

    # check 1: quotient rule
    q = (j ** 3 + 1.0) / (2.0 - j)
    f = lambda x: (x ** 3 + 1) / (2 - x)
    h = 1e-5
    npt.assert_allclose(q.d1, (f(x0 + h) - f(x0 - h)) / (2 * h), atol=1e-8)
    npt.assert_allclose(q.d2, (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h ** 2, atol=1e-5)

    # check 2: sqrt and rdiv
    r = 1.0 / ad.sqrt(j)
    npt.assert_allclose(r.d1, -0.5 * x0 ** -1.5, atol=1e-12)
    npt.assert_allclose(r.d2, 0.75 * x0 ** -2.5, atol=1e-12)


def test_laplacian_closed_forms():
    # check 1: quadratic bowl has constant laplacian 2n
    f = lambda js: js[0] * js[0] + js[1] * js[1]
    npt.assert_allclose(ad.laplacian(f, [0.3, -1.2]), 4.0, atol=1e-13)

    # check 2: product of sines
    g = lambda js: ad.sin(js[0]) * ad.sin(js[1])
    x = np.array([0.4, 1.1])
    expect = -2.0 * np.sin(x[0]) * np.sin(x[1])
    npt.assert_allclose(ad.laplacian(g, x), expect, atol=1e-13)

    # check 3: harmonic function has zero laplacian
    harm = lambda js: js[0] * js[0] - js[1] * js[1]
    npt.assert_allclose(ad.laplacian(harm, [0.9, 2.0]), 0.0, atol=1e-13)


def test_reverse_over_forward():
    # gradient w.r.t. a weight of an input second derivative -- the core
    # composition used for kinetic energy terms
    w0 = 0.7
    x0 = 0.4

    def d2_analytic(w):
        t = np.tanh(w * x0)
        return w * w * (-2.0 * t * (1.0 - t * t))

    tape = Tape()
    w = tape.leaf(np.array(w0))
    j = Jet(np.array(x0), np.array(1.0), np.array(0.0))
    out = ad.tanh(j * w)
    loss = out.d2
    tape.backward(loss)
    h = 1e-6
    fd = (d2_analytic(w0 + h) - d2_analytic(w0 - h)) / (2 * h)
    npt.assert_allclose(w.grad, fd, atol=1e-6)


def test_grad_params_flat_and_nan_guard():
    rng = np.random.default_rng(4)
    a0 = rng.normal(size=3)
    b0 = rng.normal(size=(2, 2))

    # check 1: flat concatenation in caller order, zeros for unused leaves
    tape = Tape()
    a = tape.leaf(a0)
    b = tape.leaf(b0)
    loss = (a * a).sum()
    flat = ad.grad_params(loss, [a, b])
    npt.assert_allclose(flat[:3], 2 * a0, atol=1e-12)
    npt.assert_allclose(flat[3:], np.zeros(4), atol=0)

    # check 2: non-finite forward values are named by op
    tape = Tape()
    a = tape.leaf(np.array([-1.0]))
    with np.errstate(invalid="ignore"):
        loss = ad.log(a).sum()
    with pytest.raises(NanPropagationError, match="log"):
        ad.grad_params(loss, [a])


def test_randomized_grad_sweep():
    # randomized composite expressions, reverse grads vs finite differences
    rng = np.random.default_rng(5)
    for trial in range(10):
        n = int(rng.integers(2, 6))
        x0 = rng.uniform(0.3, 1.2, size=n)

        def loss_np(x):
            return float(np.sum(np.cos(x) * x ** 2 + np.log(x) / (1 + x * x)))

        tape = Tape()
        x = tape.leaf(x0)
        y = (ad.cos(x) * x ** 2 + ad.log(x) / (1.0 + x * x)).sum()
        tape.backward(y)
        npt.assert_allclose(x.grad, _fd_grad(loss_np, x0), atol=1e-6)


def test_release_severs_graph_but_keeps_leaf_grads():
    tape = Tape()
    x = tape.leaf(np.arange(1.0, 5.0))
    y = ad.exp(x * 0.5).sum()
    tape.backward(y)
    expected = np.array(x.grad)
    node = tape.nodes[-1]
    tape.release()
    # check 1: every recorded node is dropped and unlinked
    assert tape.nodes == []
    assert node._parents == ()
    assert node._vjp is None
    assert node.grad is None
    # check 2: leaf gradients survive for reading after release
    npt.assert_allclose(x.grad, expected, atol=0.0)
