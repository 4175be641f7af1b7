"""Differentiable operations on :class:`Tensor`.

Composite layers used by the model (linear, causal attention, the LSTM layer,
layer norm, cross-entropy) are fused into single graph nodes with analytic
backward passes; this keeps the Python-side graph small enough that
desk-scale training is dominated by numpy work rather than bookkeeping.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GeLU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))  # x**3 takes a slow pow path
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result(y, (x,), backward)


# ------------------------------------------------------------------ reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(y, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# --------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return make_result(np.stack([x.data for x in xs], axis=axis), xs, backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any number of leading dims)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    y = y.reshape(lead + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(y, parents, backward)


# ------------------------------------------------------- normalisation / softmax

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), backward)


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return make_result(y, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Computed from the log-sum-exp so that extreme logits stay finite.
    """
    targets = np.asarray(targets, dtype=np.int64)
    m, c = logits.shape
    if targets.shape != (m,):
        raise ValueError(f"expected {m} targets, got shape {targets.shape}")
    if m and (targets.min() < 0 or targets.max() >= c):
        bad = targets[(targets < 0) | (targets >= c)][0]
        raise ValueError(f"target {bad} out of range [0, {c})")
    logp = log_softmax_np(logits.data, axis=1)
    rows = np.arange(m)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / m),)

    return make_result(np.asarray(loss), (logits,), backward)


# ------------------------------------------------------------------- lookups

def embedding(ids, table: Tensor) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size == 0:
        raise ValueError("embedding lookup on an empty sequence")
    if ids.min() < 0 or ids.max() >= n:
        raise ValueError(f"embedding id out of range [0, {n}): {ids.min()}..{ids.max()}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_result(table.data[ids], (table,), backward)


# ----------------------------------------------------------------- attention

def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over ``[..., T, dh]`` with a causal mask.

    Position ``t`` attends only to positions ``<= t``.
    """
    t = q.shape[-2]
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    s = np.where(mask, -np.inf, s)
    a = softmax_np(s, axis=-1)
    out = a @ v.data

    def backward(g):
        dv = np.swapaxes(a, -1, -2) @ g
        da = g @ np.swapaxes(v.data, -1, -2)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k.data
        dk = np.swapaxes(ds, -1, -2) @ q.data
        return dq, dk, dv

    return make_result(out, (q, k, v), backward)


# ----------------------------------------------------------------------- LSTM

def lstm_layer(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """One LSTM layer over ``x[B, T, D]`` from a zero state; returns ``h[B, T, H]``.

    Gate column order in the weight matrices is (input, forget, cell, output).
    The backward pass is truncation-free backpropagation through time.
    """
    bsz, steps, _ = x.shape
    hsz = w_hh.shape[0]
    if w_ih.shape != (x.shape[2], 4 * hsz) or w_hh.shape != (hsz, 4 * hsz):
        raise ValueError(f"lstm weight shapes {w_ih.shape}, {w_hh.shape} do not fit input {x.shape}")
    xw = (x.data.reshape(-1, x.shape[2]) @ w_ih.data).reshape(bsz, steps, 4 * hsz) + b.data
    gates = np.empty((bsz, steps, 4 * hsz), dtype=DTYPE)
    cs = np.empty((bsz, steps, hsz), dtype=DTYPE)
    hs = np.empty((bsz, steps, hsz), dtype=DTYPE)
    h = np.zeros((bsz, hsz), dtype=DTYPE)
    c = np.zeros((bsz, hsz), dtype=DTYPE)
    for t in range(steps):
        z = xw[:, t] + h @ w_hh.data
        ifo = _sigmoid(z)
        gg = np.tanh(z[:, 2 * hsz:3 * hsz])
        i, f, o = ifo[:, :hsz], ifo[:, hsz:2 * hsz], ifo[:, 3 * hsz:]
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[:, t, :2 * hsz] = ifo[:, :2 * hsz]
        gates[:, t, 2 * hsz:3 * hsz] = gg
        gates[:, t, 3 * hsz:] = o
        cs[:, t] = c
        hs[:, t] = h

    def backward(g):
        dz = np.empty_like(gates)
        dh_next = np.zeros((bsz, hsz), dtype=DTYPE)
        dc_next = np.zeros((bsz, hsz), dtype=DTYPE)
        for t in reversed(range(steps)):
            i = gates[:, t, :hsz]
            f = gates[:, t, hsz:2 * hsz]
            gg = gates[:, t, 2 * hsz:3 * hsz]
            o = gates[:, t, 3 * hsz:]
            tc = np.tanh(cs[:, t])
            c_prev = cs[:, t - 1] if t > 0 else np.zeros_like(tc)
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[:, t, :hsz] = dc * gg * i * (1.0 - i)
            dz[:, t, hsz:2 * hsz] = dc * c_prev * f * (1.0 - f)
            dz[:, t, 2 * hsz:3 * hsz] = dc * i * (1.0 - gg * gg)
            dz[:, t, 3 * hsz:] = dh * tc * o * (1.0 - o)
            dh_next = dz[:, t] @ w_hh.data.T
            dc_next = dc * f
        dz2 = dz.reshape(-1, 4 * hsz)
        dx = (dz2 @ w_ih.data.T).reshape(x.shape)
        dw_ih = x.data.reshape(-1, x.shape[2]).T @ dz2
        h_prev = np.concatenate([np.zeros((bsz, 1, hsz)), hs[:, :-1]], axis=1).reshape(-1, hsz)
        dw_hh = h_prev.T @ dz2
        return dx, dw_ih, dw_hh, dz2.sum(axis=0)

    return make_result(hs, (x, w_ih, w_hh, b), backward)
