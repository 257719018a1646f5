"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


def _coords(size, max_coords, rng):
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    rng = np.random.default_rng(0) if rng is None else rng
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def _relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar(value):
    v = value.data if isinstance(value, Tensor) else np.asarray(value)
    v = v.reshape(())[()]
    if not np.isfinite(v):
        raise NumericError(f"non-finite function value {v}")
    return v


def check_gradients(loss_fn, params, h=1e-5, max_coords=None, rng=None,
                    numeric_dtype=None) -> float:
    """Compare backward() gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` takes no arguments and must be deterministic. With
    ``max_coords`` set, that many coordinates per parameter are sampled.
    ``numeric_dtype`` (e.g. ``np.longdouble``) evaluates only the
    finite-difference side at that precision, which keeps rounding noise
    in ``f`` from swamping tiny gradients. Returns the max relative error,
    denominator ``max(|a|, |n|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    _scalar(loss)
    loss.backward()
    analytic = {}
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite analytic gradient")
        analytic[id(p)] = g
        p.grad = None
    saved = [p.data for p in params]
    if numeric_dtype is not None:
        for p in params:
            p.data = p.data.astype(numeric_dtype)
    try:
        return _numeric_pass(loss_fn, params, analytic, h, max_coords, rng)
    finally:
        for p, data in zip(params, saved):
            p.data = data


def _numeric_pass(loss_fn, params, analytic, h, max_coords, rng):
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = analytic[id(p)].reshape(-1)
        for i in _coords(flat.size, max_coords, rng):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(loss_fn())
            flat[i] = orig - h
            fm = _scalar(loss_fn())
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, float(_relative_error(ga[i], numeric)))
    return worst


def finite_diff_check(f, x: Tensor, h=1e-5, max_coords=None, rng=None,
                      numeric_dtype=None) -> float:
    """Max relative error between d f(x)/dx from backward() and central differences."""
    if not x.requires_grad:
        x.requires_grad = True
    return check_gradients(lambda: f(x), [x], h=h, max_coords=max_coords, rng=rng,
                           numeric_dtype=numeric_dtype)
