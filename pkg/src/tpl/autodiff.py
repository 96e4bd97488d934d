"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps a float64 array plus a closure that routes upstream gradients
to its parents. Graphs are built by the op functions below and differentiated
with :func:`backward`. The op set is exactly what the alignment autoencoder
needs: dense/conv layers, pointwise nonlinearities, pooling, interpolation,
and a differentiable time-warp whose gradient flows to both the warped values
and the warp parameters.
"""

from __future__ import annotations

import numpy as np

from . import cpab


class Var:
    """Node in the computation graph: value, accumulated gradient, backward hook."""

    __slots__ = ("value", "grad", "parents", "bwd")

    def __init__(self, value, parents=(), bwd=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.bwd = bwd

    @property
    def shape(self):
        return self.value.shape


def _accum(var: Var, g):
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += g


def backward(root: Var):
    """Backpropagate d(root)/d(node) into every ancestor's ``grad``."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


def const(value) -> Var:
    return Var(value)


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b))
    out.bwd = lambda g: (_accum(a, g), _accum(b, g))
    return out


def sub(a: Var, b: Var) -> Var:
    out = Var(a.value - b.value, (a, b))
    out.bwd = lambda g: (_accum(a, g), _accum(b, -g))
    return out


def neg(a: Var) -> Var:
    out = Var(-a.value, (a,))
    out.bwd = lambda g: _accum(a, -g)
    return out


def scale(a: Var, s: float) -> Var:
    out = Var(a.value * s, (a,))
    out.bwd = lambda g: _accum(a, g * s)
    return out


def shift(a: Var, c) -> Var:
    """Add a constant (array or scalar)."""
    out = Var(a.value + c, (a,))
    out.bwd = lambda g: _accum(a, g)
    return out


def mul(a: Var, b: Var) -> Var:
    out = Var(a.value * b.value, (a, b))
    out.bwd = lambda g: (_accum(a, g * b.value), _accum(b, g * a.value))
    return out


def mul_const(a: Var, c) -> Var:
    c = np.asarray(c, dtype=float)
    out = Var(a.value * c, (a,))
    out.bwd = lambda g: _accum(a, g * c)
    return out


def square(a: Var) -> Var:
    out = Var(a.value * a.value, (a,))
    out.bwd = lambda g: _accum(a, 2.0 * a.value * g)
    return out


def exp(a: Var) -> Var:
    y = np.exp(a.value)
    out = Var(y, (a,))
    out.bwd = lambda g: _accum(a, y * g)
    return out


def sqrt(a: Var) -> Var:
    y = np.sqrt(a.value)
    out = Var(y, (a,))
    out.bwd = lambda g: _accum(a, 0.5 / y * g)
    return out


def vsum(a: Var) -> Var:
    out = Var(a.value.sum(), (a,))
    out.bwd = lambda g: _accum(a, np.full_like(a.value, float(g)))
    return out


def vmean(a: Var) -> Var:
    n = a.value.size
    out = Var(a.value.mean(), (a,))
    out.bwd = lambda g: _accum(a, np.full_like(a.value, float(g) / n))
    return out


def relu(a: Var) -> Var:
    keep = a.value > 0.0
    out = Var(np.where(keep, a.value, 0.0), (a,))
    out.bwd = lambda g: _accum(a, g * keep)
    return out


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    out = Var(y, (a,))
    out.bwd = lambda g: _accum(a, (1.0 - y * y) * g)
    return out


def reshape(a: Var, shape) -> Var:
    orig = a.value.shape
    out = Var(a.value.reshape(shape), (a,))
    out.bwd = lambda g: _accum(a, g.reshape(orig))
    return out


def take_row(a: Var, i: int) -> Var:
    out = Var(a.value[i], (a,))

    def bwd(g):
        da = np.zeros_like(a.value)
        da[i] = g
        _accum(a, da)

    out.bwd = bwd
    return out


def standardize(a: Var, eps: float = 1e-12) -> Var:
    """Zero-mean unit-variance normalization; constants map to zeros."""
    m = a.value.mean()
    c = a.value - m
    s = np.sqrt((c * c).mean() + eps)
    y = c / s
    out = Var(y, (a,))

    def bwd(g):
        _accum(a, (g - g.mean() - y * (g * y).mean()) / s)

    out.bwd = bwd
    return out


def dense(x: Var, w: Var, b: Var) -> Var:
    """Affine map w @ x + b for a vector x."""
    out = Var(w.value @ x.value + b.value, (x, w, b))

    def bwd(g):
        _accum(w, np.outer(g, x.value))
        _accum(x, w.value.T @ g)
        _accum(b, g)

    out.bwd = bwd
    return out


def conv1d(x: Var, w: Var, b: Var) -> Var:
    """Length-preserving 1-D cross-correlation with zero padding, stride 1.

    x: (C_in, L), w: (C_out, C_in, k) with odd k, b: (C_out,).
    """
    c_out, c_in, k = w.value.shape
    if x.value.ndim != 2 or x.value.shape[0] != c_in:
        raise ValueError(
            f"conv1d input shape {x.value.shape} incompatible with weights {w.value.shape}"
        )
    if k % 2 != 1:
        raise ValueError("conv1d requires odd kernel size for same padding")
    length = x.value.shape[1]
    pad = k // 2
    xpad = np.zeros((c_in, length + 2 * pad))
    xpad[:, pad : pad + length] = x.value
    windows = np.lib.stride_tricks.sliding_window_view(xpad, k, axis=1)  # (C_in, L, k)
    cols = windows.transpose(0, 2, 1).reshape(c_in * k, length)
    w2 = w.value.reshape(c_out, c_in * k)
    out = Var(w2 @ cols + b.value[:, None], (x, w, b))

    def bwd(g):
        _accum(b, g.sum(axis=1))
        _accum(w, (g @ cols.T).reshape(c_out, c_in, k))
        dcols = (w2.T @ g).reshape(c_in, k, length)
        dxpad = np.zeros_like(xpad)
        for dk in range(k):
            dxpad[:, dk : dk + length] += dcols[:, dk, :]
        _accum(x, dxpad[:, pad : pad + length])

    out.bwd = bwd
    return out


def global_avg_pool(x: Var) -> Var:
    """Mean over the time axis: (C, L) -> (C,)."""
    length = x.value.shape[-1]
    out = Var(x.value.mean(axis=-1), (x,))
    out.bwd = lambda g: _accum(x, np.repeat(g[..., None], length, axis=-1) / length)
    return out


def _scatter_add_last(dst: np.ndarray, idx: np.ndarray, src: np.ndarray):
    if dst.ndim == 1:
        np.add.at(dst, idx, src)
    else:
        np.add.at(dst.T, idx, src.T)


def gather_last(x: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=int)
    out = Var(x.value[..., idx], (x,))

    def bwd(g):
        dx = np.zeros_like(x.value)
        _scatter_add_last(dx, idx, g)
        _accum(x, dx)

    out.bwd = bwd
    return out


def interp_linear(x: Var, positions: np.ndarray) -> Var:
    """Linear interpolation of x (..., L) at fixed fractional positions."""
    length = x.value.shape[-1]
    pos = np.clip(np.asarray(positions, dtype=float), 0.0, length - 1.0)
    lo = np.clip(np.floor(pos).astype(int), 0, length - 2)
    frac = pos - lo
    out = Var((1.0 - frac) * x.value[..., lo] + frac * x.value[..., lo + 1], (x,))

    def bwd(g):
        dx = np.zeros_like(x.value)
        _scatter_add_last(dx, lo, (1.0 - frac) * g)
        _scatter_add_last(dx, lo + 1, frac * g)
        _accum(x, dx)

    out.bwd = bwd
    return out


def resample_linear(x: Var, new_length: int) -> Var:
    """Differentiable uniform resampling along the last axis."""
    length = x.value.shape[-1]
    return interp_linear(x, np.linspace(0.0, length - 1.0, new_length))


def warp(x: Var, theta: Var, out_length: int, flow=None) -> Var:
    """Compose x (..., L) with the warp parameterized by theta.

    Gradients propagate both to the interpolated values and, through the warp
    Jacobian, to theta. ``flow`` optionally supplies precomputed
    (positions, jacobian) for theta.value on the length-``out_length`` grid,
    letting callers share one integration among several warps.
    """
    length = x.value.shape[-1]
    if flow is None:
        flow = flow_with_grad(theta.value, out_length)
    tau, jac = flow
    pos = tau * (length - 1.0)
    lo = np.clip(np.floor(np.clip(pos, 0.0, length - 1.0)).astype(int), 0, length - 2)
    frac = np.clip(pos, 0.0, length - 1.0) - lo
    out = Var((1.0 - frac) * x.value[..., lo] + frac * x.value[..., lo + 1], (x, theta))

    def bwd(g):
        dx = np.zeros_like(x.value)
        _scatter_add_last(dx, lo, (1.0 - frac) * g)
        _scatter_add_last(dx, lo + 1, frac * g)
        _accum(x, dx)
        slope = x.value[..., lo + 1] - x.value[..., lo]
        dpos = g * slope
        if dpos.ndim > 1:
            dpos = dpos.reshape(-1, dpos.shape[-1]).sum(axis=0)
        _accum(theta, jac.T @ (dpos * (length - 1.0)))

    out.bwd = bwd
    return out


def flow_with_grad(theta_value: np.ndarray, out_length: int):
    """Warped uniform grid and its Jacobian for reuse across warp ops."""
    tess = cpab.tess_for_theta(theta_value)
    grid = np.linspace(0.0, 1.0, out_length)
    return cpab.warp_points_with_grad(theta_value, tess, grid)
