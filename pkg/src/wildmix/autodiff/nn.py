"""Parameter containers for the layers the separation model is built from."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import ops
from .tensor import Tensor, get_default_dtype


def parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class; parameters are discovered from instance attributes.

    Attributes holding a :class:`Tensor` with ``requires_grad``, another
    ``Module``, or a list/dict of those are walked in insertion order, so the
    parameter order is a pure function of construction.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.bias = parameter(_uniform(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-8):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Conv1d(Module):
    """Length-preserving 1-D convolution along the sequence axis."""

    def __init__(self, kernel, c_in, c_out, rng):
        if kernel < 1:
            raise ConfigError(f"kernel size must be >= 1, got {kernel}")
        fan_in = kernel * c_in
        self.weight = parameter(_uniform(rng, fan_in, (kernel, c_in, c_out)))
        self.bias = parameter(_uniform(rng, fan_in, (c_out,)))

    def __call__(self, x):
        return ops.conv1d_same(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.proj = {}
        for tag in ("q", "k", "v", "o"):
            self.proj["w" + tag] = parameter(_uniform(rng, dim, (dim, dim)))
            # a key bias shifts every score of a query equally; softmax ignores it
            if tag != "k":
                self.proj["b" + tag] = parameter(_uniform(rng, dim, (dim,)))

    def __call__(self, x, memory=None, return_weights=False):
        memory = x if memory is None else memory
        return ops.multi_head_attention(x, memory, self.proj, self.heads, return_weights)


class FeedForward(Module):
    """Position-wise two-layer ReLU network."""

    def __init__(self, dim, hidden, rng):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.outer(ops.relu(self.inner(x)))
