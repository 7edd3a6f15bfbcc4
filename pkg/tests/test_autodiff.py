"""Finite-difference oracles for the differentiation engine."""

import numpy as np
import pytest

from escore import autodiff as ad
from escore.model import EnergyNet, NetConfig
from escore.numerics import Rng


def tiny_net(seed: int) -> EnergyNet:
    cfg = NetConfig(state_hidden=4, trunk_hidden=6, n_blocks=1, time_dim=4,
                    head_hidden=4)
    return EnergyNet(2, 2, cfg, Rng(seed))


def n_params(net) -> int:
    return sum(p.value.size for p in net.params())


def fd_input_gradient(build, a, h=1e-6):
    g = np.zeros_like(a)
    for j in range(a.shape[1]):
        ap, am = a.copy(), a.copy()
        ap[:, j] += h
        am[:, j] -= h
        g[:, j] = (ad.input_gradient(build, ap)[0]
                   - ad.input_gradient(build, am)[0]) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(20))
def test_input_gradient_matches_fd_on_random_nets(seed):
    net = tiny_net(seed)
    assert n_params(net) <= 500
    rng = Rng(100 + seed)
    s = rng.normal((3, 2))
    a = rng.normal((3, 2))
    build = net.builder(s, np.full(3, 0.4))
    _, g = ad.input_gradient(build, a)
    g_fd = fd_input_gradient(build, a)
    scale = max(1.0, np.max(np.abs(g)))
    assert np.max(np.abs(g - g_fd)) / scale < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_param_gradient_of_score_loss_matches_fd(seed):
    net = tiny_net(seed)
    rng = Rng(200 + seed)
    s = rng.normal((3, 2))
    a = rng.normal((3, 2))
    t = np.full(3, 0.4)
    target = rng.normal((3, 2))

    def loss_fn(g):
        r = g - target
        return float(np.mean(np.sum(r * r, axis=1))), (2.0 / 3) * r

    def loss_at_current_params():
        _, g = ad.input_gradient(net.builder(s, t), a)
        return float(np.mean(np.sum((g - target) ** 2, axis=1)))

    ad.param_gradient_of_input_grad_loss(net.builder(s, t), a, loss_fn,
                                         net.params())
    analytic = [p.grad.copy() for p in net.params()]
    check_rng = np.random.default_rng(seed)
    h = 1e-5
    for p, grad in zip(net.params(), analytic):
        flat = p.value.reshape(-1)
        for idx in check_rng.choice(flat.size, size=min(3, flat.size),
                                    replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_at_current_params()
            flat[idx] = orig - h
            lm = loss_at_current_params()
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grad.reshape(-1)[idx]
            assert abs(an - fd) / max(1.0, abs(fd)) < 1e-4


def test_hvp_matches_fd_of_gradient():
    net = tiny_net(0)
    rng = Rng(5)
    s = rng.normal((4, 2))
    a = rng.normal((4, 2))
    v = rng.normal((4, 2))
    build = net.builder(s, np.full(4, 0.2))
    _, g, hv = ad.grad_and_hvp(build, a, v)
    h = 1e-6
    _, gp = ad.input_gradient(build, a + h * v)
    _, gm = ad.input_gradient(build, a - h * v)
    hv_fd = (gp - gm) / (2 * h)
    assert np.max(np.abs(hv - hv_fd)) < 1e-5
    # the tangent-adjoint channel reproduces the plain gradient exactly
    _, g_plain = ad.input_gradient(build, a)
    assert np.array_equal(g, g_plain)


def test_hessian_is_symmetric():
    net = tiny_net(1)
    rng = Rng(6)
    a = rng.normal((5, 2))
    build = net.builder(rng.normal((5, 2)), np.full(5, 0.7))
    H = ad.hessian(build, a)
    assert np.max(np.abs(H - np.swapaxes(H, 1, 2))) < 1e-12


def test_repeated_evaluation_is_bitwise_identical():
    net = tiny_net(2)
    rng = Rng(7)
    s, a = rng.normal((2, 2)), rng.normal((2, 2))
    build = net.builder(s, np.full(2, 0.5))
    e1, g1 = ad.input_gradient(build, a)
    e2, g2 = ad.input_gradient(build, a)
    assert np.array_equal(e1, e2) and np.array_equal(g1, g2)


# -- elementwise primitives -------------------------------------------------

def fd_check_unary(op, x, h=1e-6, tol=1e-8):
    tape = ad.Tape()
    node = tape.input(x)
    out = ad.rsum(tape, op(tape, node))
    ad.backward(tape, out, np.ones_like(out.value))
    an = node.bar
    fd = np.zeros_like(x)
    for j in range(x.shape[1]):
        xp, xm = x.copy(), x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        tp = ad.Tape()
        tm = ad.Tape()
        fp = op(tp, tp.input(xp)).value.sum(axis=1)
        fm = op(tm, tm.input(xm)).value.sum(axis=1)
        fd[:, j] = (fp - fm) / (2 * h)
    assert np.max(np.abs(an - fd)) < tol


@pytest.mark.parametrize("op", [ad.mish, ad.tanh, ad.exp, ad.square, ad.log])
def test_unary_gradients(op):
    x = Rng(11).uniform((4, 3)) + 0.5   # positive, safe for log
    fd_check_unary(op, x)


def test_mish_second_derivative():
    x = Rng(12).normal((3, 2))
    v = Rng(13).normal((3, 2))

    def build(tape, node):
        return ad.rsum(tape, ad.mish(tape, node))

    _, _, hv = ad.grad_and_hvp(build, x, v)
    h = 1e-6
    _, gp = ad.input_gradient(build, x + h * v)
    _, gm = ad.input_gradient(build, x - h * v)
    assert np.max(np.abs(hv - (gp - gm) / (2 * h))) < 1e-6


def test_minimum_routes_gradient_to_smaller_branch():
    tape = ad.Tape()
    x = tape.input(np.array([[1.0, 5.0]]))
    y = tape.input(np.array([[2.0, 3.0]]))
    out = ad.rsum(tape, ad.minimum(tape, x, y))
    ad.backward(tape, out, np.ones((1, 1)))
    assert np.array_equal(x.bar, [[1.0, 0.0]])
    assert np.array_equal(y.bar, [[0.0, 1.0]])


def test_clamp_gradient_zero_outside():
    tape = ad.Tape()
    x = tape.input(np.array([[-3.0, 0.0, 3.0]]))
    out = ad.rsum(tape, ad.clamp(tape, x, -1.0, 1.0))
    ad.backward(tape, out, np.ones((1, 1)))
    assert np.array_equal(x.bar, [[0.0, 1.0, 0.0]])


# -- spectral normalization -------------------------------------------------

def test_power_iterate_matches_svd():
    W = Rng(20).normal((5, 8))
    sn = ad.SpectralAffine(W, np.zeros(5), Rng(21).normal((5,)))
    sigma, u, v = sn.power_iterate()
    ref = np.linalg.svd(W, compute_uv=False)[0]
    assert abs(sigma - ref) < 1e-12
    assert abs(np.linalg.norm(u) - 1.0) < 1e-12
    assert np.allclose(W @ v, sigma * u, atol=1e-10)


def test_project_caps_spectral_norm():
    W = 3.0 * Rng(22).normal((4, 4))
    sn = ad.SpectralAffine(W, None, Rng(23).normal((4,)))
    sn.project()
    assert np.linalg.svd(sn.W.value, compute_uv=False)[0] <= 1.0 + 1e-12


def test_project_leaves_contractive_weight_alone():
    W = 0.01 * Rng(24).normal((4, 4))
    sn = ad.SpectralAffine(W.copy(), None, Rng(25).normal((4,)))
    sn.project()
    assert np.array_equal(sn.W.value, W)


@pytest.mark.parametrize("scale", [0.1, 3.0])  # below and above unit norm
def test_sn_affine_weight_gradient_matches_fd(scale):
    rng = Rng(30)
    W = scale * rng.normal((3, 4))
    sn = ad.SpectralAffine(W, rng.normal((3,)), rng.normal((3,)))
    x = rng.normal((2, 4))
    seed = rng.normal((2, 3))

    def forward_value():
        tape = ad.Tape()
        out = ad.sn_affine(tape, tape.input(x), sn)
        return float(np.sum(seed * out.value))

    tape = ad.Tape()
    out = ad.sn_affine(tape, tape.input(x), sn)
    sn.W.zero_grad()
    sn.b.zero_grad()
    ad.backward(tape, out, seed)
    h = 1e-6
    flat = sn.W.value.reshape(-1)
    for idx in range(0, flat.size, 3):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = forward_value()
        flat[idx] = orig - h
        fm = forward_value()
        flat[idx] = orig
        fd = (fp - fm) / (2 * h)
        assert abs(sn.W.grad.reshape(-1)[idx] - fd) < 1e-6
