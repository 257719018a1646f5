"""Differentiable operations on :class:`Tensor`.

All ops accept leading batch dimensions; "last axis" ops act on features
and ``conv1d_same`` convolves along the second-to-last (sequence) axis.
"""
from __future__ import annotations

import numpy as np

import contextlib

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, make_node, unbroadcast

_relu_margins = None


@contextlib.contextmanager
def relu_margin():
    """Record the smallest ``|input|`` seen by :func:`relu` inside the block.

    Finite differences are only meaningful away from ReLU kinks; gradient
    checks use this to confirm the evaluation point is safely smooth.
    """
    global _relu_margins
    outer, _relu_margins = _relu_margins, []
    probe = _MarginProbe()
    try:
        yield probe
    finally:
        probe.value = min(_relu_margins, default=float("inf"))
        _relu_margins = outer


class _MarginProbe:
    value = float("inf")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def back(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_node(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >=2-D input, got {a.shape}")
    return make_node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    if _relu_margins is not None and a.size:
        _relu_margins.append(float(np.min(np.abs(a.data))))
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ConfigError(f"softmax over an empty axis (shape {a.shape})")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return make_node(out, (x, gain, bias), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ weight + bias``."""
    x = as_tensor(x, weight.dtype)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects last dim {weight.shape[0]}, got input {x.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back)


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded convolution along the sequence axis that keeps its length.

    ``x`` is ``(..., L, C_in)``, ``weight`` is ``(K, C_in, C_out)``; output is
    ``(..., L, C_out)``. Output position ``t`` sees inputs
    ``t - (K-1)//2 ... t + K//2``.
    """
    x = as_tensor(x, weight.dtype)
    k, cin, cout = weight.shape
    if x.ndim < 2 or x.shape[-1] != cin:
        raise ShapeError(f"conv1d expects (..., L, {cin}) input, got {x.shape}")
    length = x.shape[-2]
    left, right = (k - 1) // 2, k // 2
    pad_width = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad_width)
    # cols[..., t, j, c] = xp[..., t + j, c]
    cols = np.stack([xp[..., j : j + length, :] for j in range(k)], axis=-2)
    cols2 = cols.reshape(*x.shape[:-1], k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols2 @ w2
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.reshape(-1, k * cin).T @ g2).reshape(k, cin, cout)
        gcols = (g @ w2.T).reshape(*x.shape[:-1], k, cin)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j : j + length, :] += gcols[..., j, :]
        gx = gxp[..., left : left + length, :]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back)


def dropout(x: Tensor, rate: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout; the exact identity when ``train`` is false or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., L, D) -> (..., heads, L, D/heads)``."""
    *lead, length, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    y = reshape(x, (*lead, length, heads, d // heads))
    n = y.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return permute(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, heads, length, dk = x.shape
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return reshape(permute(x, axes), (*lead, length, heads * dk))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple:
    """Unmasked attention; returns ``(output, weights)``."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k)), scale)
    weights = softmax(scores)
    return matmul(weights, v), weights


def multi_head_attention(query_in: Tensor, kv_in: Tensor, params: dict, heads: int,
                         return_weights: bool = False):
    """Multi-head attention with learned Q/K/V/output projections.

    ``params`` maps ``wq, bq, wk, wv, bv, wo, bo`` (``bk`` optional) to tensors. Self
    attention passes the same tensor twice; cross attention passes the
    memory as ``kv_in``. No masking: every position attends everywhere.
    """
    if query_in.shape[-1] != kv_in.shape[-1]:
        raise ShapeError(f"query width {query_in.shape[-1]} != memory width {kv_in.shape[-1]}")
    q = split_heads(linear(query_in, params["wq"], params["bq"]), heads)
    k = split_heads(linear(kv_in, params["wk"], params.get("bk")), heads)
    v = split_heads(linear(kv_in, params["wv"], params["bv"]), heads)
    ctx, weights = scaled_dot_attention(q, k, v)
    out = linear(merge_heads(ctx), params["wo"], params["bo"])
    return (out, weights) if return_weights else out


def self_attention(x: Tensor, params: dict, heads: int, return_weights: bool = False):
    return multi_head_attention(x, x, params, heads, return_weights)


def cross_attention(x: Tensor, memory: Tensor, params: dict, heads: int,
                    return_weights: bool = False):
    return multi_head_attention(x, memory, params, heads, return_weights)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all entries."""
    diff = pred - as_tensor(target, pred.dtype)
    return mean(mul(diff, diff))
