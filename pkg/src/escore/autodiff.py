"""Tape-based reverse-mode differentiation with a forward tangent channel.

The engine differentiates scalar-output networks built from a closed set
of primitives (affine, spectrally normalized affine, Mish, FiLM, concat,
elementwise algebra). Two passes are supported:

* plain reverse mode: gradient of the scalar output w.r.t. the action
  input (per batch row);
* forward-over-reverse: nodes downstream of a tangent-carrying input
  propagate a tangent alongside their value, and the reverse pass
  propagates adjoints of both channels. Seeding the tangent adjoint of
  the output yields exact Hessian-vector products and exact parameter
  gradients of any loss that depends on the parameters only through the
  input gradient.

Values are float64 arrays of shape (batch, dim). A tangent of ``None``
is structurally zero: constants and parameters never carry tangents, so
only first derivatives of the spectral normalization map are needed, and
the conditioning subgraph stays out of the tangent channel entirely.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Param:
    """Trainable array with an accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


class Node:
    __slots__ = ("value", "tangent", "bar", "bar_t", "backward")

    def __init__(self, value, tangent=None):
        self.value = value
        self.tangent = tangent
        self.bar = None
        self.bar_t = None
        self.backward = None


class Tape:
    """Records nodes in execution order for the reverse sweep."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _node(self, value, tangent=None) -> Node:
        n = Node(value, tangent)
        self.nodes.append(n)
        return n

    def input(self, value: np.ndarray, tangent: np.ndarray | None = None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=np.float64)
        return self._node(value, tangent)

    constant = input


def _acc_bar(node: Node, delta):
    node.bar = delta if node.bar is None else node.bar + delta


def _acc_bar_t(node: Node, delta):
    if node.tangent is None:
        return  # adjoint of a structurally-zero tangent never matters
    node.bar_t = delta if node.bar_t is None else node.bar_t + delta


def backward(tape: Tape, out: Node, seed, seed_t=None) -> None:
    """Run the reverse sweep from ``out`` with the given adjoint seeds."""
    out.bar = np.asarray(seed, dtype=np.float64) if seed is not None else None
    if seed_t is not None:
        if out.tangent is None:
            raise ValueError("tangent adjoint seeded but no tangent was propagated")
        out.bar_t = np.asarray(seed_t, dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.backward is not None and (node.bar is not None or node.bar_t is not None):
            node.backward()


# ---------------------------------------------------------------------------
# primitives

def affine(tape: Tape, x: Node, W: Param, b: Param | None) -> Node:
    Wv = W.value
    y = x.value @ Wv.T
    if b is not None:
        y = y + b.value
    yt = x.tangent @ Wv.T if x.tangent is not None else None
    out = tape._node(y, yt)

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar @ Wv)
            W.grad += out.bar.T @ x.value
            if b is not None:
                b.grad += out.bar.sum(axis=0)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t @ Wv)
            W.grad += out.bar_t.T @ x.tangent

    out.backward = back
    return out


class SpectralAffine:
    """Affine map whose weight is rescaled by max(1, largest singular value).

    The top singular pair is found by power iteration from a persistent
    left vector and re-run to convergence at every forward call, so the
    analytic gradient (which uses the u v^T variation of the singular
    value) matches finite differences.
    """

    def __init__(self, W: np.ndarray, b: np.ndarray | None, rng_u: np.ndarray):
        self.W = Param(W)
        self.b = Param(b) if b is not None else None
        u = np.asarray(rng_u, dtype=np.float64)
        self.u = u / np.linalg.norm(u)
        self._cache = None

    def power_iterate(self):
        """Returns (sigma, u, v), the top singular triple of the current
        weight, and refreshes the stored left vector.

        Computed by exact SVD rather than iterating: near-degenerate top
        singular values make power iteration arbitrarily slow to reach
        the tolerance needed for finite-difference-exact gradients, and
        the SVD is its converged limit. The stored vector fixes the sign
        convention so repeated calls agree bit for bit.
        """
        W = self.W.value
        if self._cache is not None:
            sigma, u, v, W_seen = self._cache
            if np.array_equal(W, W_seen):
                return sigma, u, v
        U, S, Vt = np.linalg.svd(W, full_matrices=False)
        u = U[:, 0]
        v = Vt[0]
        if u @ self.u < 0.0:
            u = -u
            v = -v
        self.u = u
        self._cache = (float(S[0]), u, v, W.copy())
        return float(S[0]), u, v

    def project(self, eps: float = 0.0):
        """Divide the stored weight down to unit spectral norm if above it."""
        sigma, _, _ = self.power_iterate()
        if sigma > 1.0 + eps:
            self.W.value /= sigma

    def params(self):
        return [self.W] + ([self.b] if self.b is not None else [])


def sn_affine(tape: Tape, x: Node, p: SpectralAffine) -> Node:
    sigma, u, v = p.power_iterate()
    scale = max(1.0, sigma)
    Weff = p.W.value / scale
    y = x.value @ Weff.T
    if p.b is not None:
        y = y + p.b.value
    yt = x.tangent @ Weff.T if x.tangent is not None else None
    out = tape._node(y, yt)

    def back():
        Wbar_eff = None
        if out.bar is not None:
            _acc_bar(x, out.bar @ Weff)
            Wbar_eff = out.bar.T @ x.value
            if p.b is not None:
                p.b.grad += out.bar.sum(axis=0)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t @ Weff)
            contrib = out.bar_t.T @ x.tangent
            Wbar_eff = contrib if Wbar_eff is None else Wbar_eff + contrib
        if Wbar_eff is not None:
            if sigma > 1.0:
                inner = float(np.sum(Wbar_eff * Weff))
                p.W.grad += Wbar_eff / sigma - (inner / sigma) * np.outer(u, v)
            else:
                p.W.grad += Wbar_eff

    out.backward = back
    return out


def mish(tape: Tape, x: Node) -> Node:
    xv = x.value
    s = expit(xv)
    # tanh(softplus(x)) rewritten in terms of the sigmoid: with
    # z = e^{-softplus(x)} = 1 - s, tanh(softplus) = (1 - z^2)/(1 + z^2).
    z2 = (1.0 - s) ** 2
    t = (1.0 - z2) / (1.0 + z2)
    tp = (1.0 - t * t) * s
    m1 = t + xv * tp
    yt = m1 * x.tangent if x.tangent is not None else None
    out = tape._node(xv * t, yt)

    def m2():
        # second derivative, only materialized on the tangent-adjoint path
        tpp = -2.0 * t * tp * s + (1.0 - t * t) * s * (1.0 - s)
        return 2.0 * tp + xv * tpp

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar * m1)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t * m1)
            _acc_bar(x, out.bar_t * m2() * x.tangent)

    out.backward = back
    return out


def mish_scalar(x: float) -> float:
    """x * tanh(softplus(x)); the C2 activation used throughout."""
    return float(x * np.tanh(np.logaddexp(0.0, x)))


def _elementwise(tape: Tape, x: Node, f, f1, f2) -> Node:
    xv = x.value
    d1 = f1(xv)
    yt = d1 * x.tangent if x.tangent is not None else None
    out = tape._node(f(xv), yt)

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar * d1)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t * d1)
            _acc_bar(x, out.bar_t * f2(xv) * x.tangent)

    out.backward = back
    return out


def tanh(tape: Tape, x: Node) -> Node:
    th = np.tanh(x.value)
    return _elementwise(tape, x, lambda v: th, lambda v: 1.0 - th * th,
                        lambda v: -2.0 * th * (1.0 - th * th))


def exp(tape: Tape, x: Node) -> Node:
    ev = np.exp(x.value)
    return _elementwise(tape, x, lambda v: ev, lambda v: ev, lambda v: ev)


def square(tape: Tape, x: Node) -> Node:
    return _elementwise(tape, x, np.square, lambda v: 2.0 * v,
                        lambda v: np.full_like(v, 2.0))


def log(tape: Tape, x: Node) -> Node:
    return _elementwise(tape, x, np.log, lambda v: 1.0 / v,
                        lambda v: -1.0 / v ** 2)


def clamp(tape: Tape, x: Node, lo: float, hi: float) -> Node:
    def d1(v):
        return ((v >= lo) & (v <= hi)).astype(np.float64)
    return _elementwise(tape, x, lambda v: np.clip(v, lo, hi), d1,
                        lambda v: np.zeros_like(v))


def scale(tape: Tape, x: Node, c: float) -> Node:
    yt = c * x.tangent if x.tangent is not None else None
    out = tape._node(c * x.value, yt)

    def back():
        if out.bar is not None:
            _acc_bar(x, c * out.bar)
        if out.bar_t is not None:
            _acc_bar_t(x, c * out.bar_t)

    out.backward = back
    return out


def _merge_tangents(xt, yt):
    if xt is None:
        return yt
    if yt is None:
        return xt
    return xt + yt


def add(tape: Tape, x: Node, y: Node) -> Node:
    out = tape._node(x.value + y.value, _merge_tangents(x.tangent, y.tangent))

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar)
            _acc_bar(y, out.bar)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t)
            _acc_bar_t(y, out.bar_t)

    out.backward = back
    return out


def add_const(tape: Tape, x: Node, c) -> Node:
    out = tape._node(x.value + c, x.tangent)

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t)

    out.backward = back
    return out


def mul(tape: Tape, x: Node, y: Node) -> Node:
    xv, yv = x.value, y.value
    yt = None
    if x.tangent is not None:
        yt = x.tangent * yv
    if y.tangent is not None:
        yt = _merge_tangents(yt, xv * y.tangent)
    out = tape._node(xv * yv, yt)

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar * yv)
            _acc_bar(y, out.bar * xv)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t * yv)
            _acc_bar_t(y, out.bar_t * xv)
            if y.tangent is not None:
                _acc_bar(x, out.bar_t * y.tangent)
            if x.tangent is not None:
                _acc_bar(y, out.bar_t * x.tangent)

    out.backward = back
    return out


def minimum(tape: Tape, x: Node, y: Node) -> Node:
    """Elementwise minimum; at ties the subgradient goes to x."""
    mask = (x.value <= y.value).astype(np.float64)
    yt = None
    if x.tangent is not None or y.tangent is not None:
        xt = x.tangent if x.tangent is not None else np.zeros_like(x.value)
        ytan = y.tangent if y.tangent is not None else np.zeros_like(y.value)
        yt = mask * xt + (1.0 - mask) * ytan
    out = tape._node(np.minimum(x.value, y.value), yt)

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar * mask)
            _acc_bar(y, out.bar * (1.0 - mask))
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t * mask)
            _acc_bar_t(y, out.bar_t * (1.0 - mask))

    out.backward = back
    return out


def film(tape: Tape, x: Node, gamma: Node, beta: Node) -> Node:
    """Feature-wise modulation: y = x * (1 + gamma) + beta."""
    g1 = 1.0 + gamma.value
    yt = None
    if x.tangent is not None:
        yt = x.tangent * g1
    if gamma.tangent is not None:
        yt = _merge_tangents(yt, x.value * gamma.tangent)
    if beta.tangent is not None:
        yt = _merge_tangents(yt, beta.tangent)
    out = tape._node(x.value * g1 + beta.value, yt)

    def back():
        if out.bar is not None:
            _acc_bar(x, out.bar * g1)
            _acc_bar(gamma, out.bar * x.value)
            _acc_bar(beta, out.bar)
        if out.bar_t is not None:
            _acc_bar_t(x, out.bar_t * g1)
            if gamma.tangent is not None:
                _acc_bar(x, out.bar_t * gamma.tangent)
            if x.tangent is not None:
                _acc_bar(gamma, out.bar_t * x.tangent)
            _acc_bar_t(gamma, out.bar_t * x.value)
            _acc_bar_t(beta, out.bar_t)

    out.backward = back
    return out


def concat(tape: Tape, xs: list[Node]) -> Node:
    if any(x.tangent is not None for x in xs):
        yt = np.concatenate(
            [x.tangent if x.tangent is not None else np.zeros_like(x.value)
             for x in xs], axis=1)
    else:
        yt = None
    out = tape._node(np.concatenate([x.value for x in xs], axis=1), yt)
    splits = np.cumsum([x.value.shape[1] for x in xs])[:-1]

    def back():
        if out.bar is not None:
            for x, piece in zip(xs, np.split(out.bar, splits, axis=1)):
                _acc_bar(x, piece)
        if out.bar_t is not None:
            for x, piece in zip(xs, np.split(out.bar_t, splits, axis=1)):
                _acc_bar_t(x, piece)

    out.backward = back
    return out


def rsum(tape: Tape, x: Node) -> Node:
    """Row-wise sum to shape (batch, 1)."""
    yt = x.tangent.sum(axis=1, keepdims=True) if x.tangent is not None else None
    out = tape._node(x.value.sum(axis=1, keepdims=True), yt)
    d = x.value.shape[1]

    def back():
        if out.bar is not None:
            _acc_bar(x, np.broadcast_to(out.bar, (out.bar.shape[0], d)))
        if out.bar_t is not None:
            _acc_bar_t(x, np.broadcast_to(out.bar_t, (out.bar_t.shape[0], d)))

    out.backward = back
    return out


# ---------------------------------------------------------------------------
# high-level entry points over scalar-output builders
#
# A "builder" is a callable (tape, a_node) -> output node of shape (B, 1);
# states, times, and parameters are closed over.

def _check_scalar(out: Node):
    if out.value.ndim != 2 or out.value.shape[1] != 1:
        raise ValueError(f"builder must produce a scalar per row, got {out.value.shape}")


def input_gradient(build, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (value, d value / d a) of a scalar-output builder."""
    a = np.asarray(a, dtype=np.float64)
    tape = Tape()
    a_node = tape.input(a)
    out = build(tape, a_node)
    _check_scalar(out)
    backward(tape, out, np.ones_like(out.value))
    g = a_node.bar if a_node.bar is not None else np.zeros_like(a)
    return out.value[:, 0].copy(), g


def grad_and_hvp(build, a: np.ndarray, v: np.ndarray):
    """Per-row (value, gradient, Hessian @ v) w.r.t. the input."""
    a = np.asarray(a, dtype=np.float64)
    tape = Tape()
    a_node = tape.input(a, tangent=np.asarray(v, dtype=np.float64))
    out = build(tape, a_node)
    _check_scalar(out)
    # Seeding only the tangent adjoint makes the value adjoint of the
    # input equal H @ v, while its tangent adjoint reproduces the plain
    # gradient (the tangent-adjoint channel chains first-order only).
    backward(tape, out, None, np.ones_like(out.value))
    g = a_node.bar_t if a_node.bar_t is not None else np.zeros_like(a)
    hv = a_node.bar if a_node.bar is not None else np.zeros_like(a)
    return out.value[:, 0].copy(), g, hv


def hessian(build, a: np.ndarray) -> np.ndarray:
    """Dense per-row Hessian of the scalar output w.r.t. the input,
    assembled column-by-column from Hessian-vector products."""
    a = np.asarray(a, dtype=np.float64)
    B, d = a.shape
    H = np.empty((B, d, d))
    for j in range(d):
        v = np.zeros_like(a)
        v[:, j] = 1.0
        _, _, hv = grad_and_hvp(build, a, v)
        H[:, :, j] = hv
    return H


def param_gradient_of_input_grad_loss(build, a: np.ndarray, loss_fn, params) -> float:
    """Gradient of loss(g) w.r.t. the parameters, where g is the per-row
    input gradient of the builder.

    ``loss_fn(g) -> (loss, dloss_dg)`` must supply the analytic gradient
    of the scalar loss in its (B, d) argument. Parameter gradients are
    accumulated into each param's ``.grad``; the loss value is returned.
    """
    a = np.asarray(a, dtype=np.float64)
    _, g = input_gradient(build, a)
    loss, dldg = loss_fn(g)
    tape = Tape()
    a_node = tape.input(a, tangent=np.asarray(dldg, dtype=np.float64))
    out = build(tape, a_node)
    _check_scalar(out)
    for p in params:
        p.zero_grad()
    backward(tape, out, None, np.ones_like(out.value))
    return float(loss)


def param_gradient_of_value_loss(build, a: np.ndarray, seed: np.ndarray, params,
                                 zero: bool = True) -> np.ndarray:
    """First-order parameter gradients of sum(seed * output); returns the
    per-row output values. Used by the soft-RL module."""
    a = np.asarray(a, dtype=np.float64)
    tape = Tape()
    a_node = tape.input(a)
    out = build(tape, a_node)
    _check_scalar(out)
    if zero:
        for p in params:
            p.zero_grad()
    backward(tape, out, np.asarray(seed, dtype=np.float64))
    return out.value[:, 0].copy()
