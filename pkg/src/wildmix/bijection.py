"""Set losses between predicted and ground-truth sources.

The training loss is the greedy bijection: predictions are visited in index
order and each one claims the closest unclaimed ground-truth source. The
Hungarian solver gives the optimal matching and is used as a reference.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .autodiff.ops import mean, mul
from .errors import ContractError, ShapeError


def _stack(sources) -> np.ndarray:
    arrs = [np.asarray(getattr(x, "data", x), dtype=np.float64) for x in sources]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ShapeError(f"sources differ in shape: {sorted(shapes)}")
    return np.stack(arrs)


def pairwise_mse(preds, truths) -> np.ndarray:
    """``sim[i, j] = mean((preds[i] - truths[j])**2)``."""
    p, t = _stack(preds), _stack(truths)
    if p.shape[1:] != t.shape[1:]:
        raise ShapeError(f"prediction shape {p.shape[1:]} != truth shape {t.shape[1:]}")
    p = p.reshape(p.shape[0], -1)
    t = t.reshape(t.shape[0], -1)
    # direct differences keep exactness at sim == 0
    return np.array([[np.mean((pi - tj) ** 2) for tj in t] for pi in p])


def greedy_assignment(sim) -> list:
    """``assignment[i]`` = truth index claimed by prediction ``i``; ties go to the smallest index."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {sim.shape}")
    remaining = list(range(sim.shape[1]))
    assignment = []
    for i in range(sim.shape[0]):
        j = min(remaining, key=lambda c: (sim[i, c], c))
        assignment.append(j)
        remaining.remove(j)
    return assignment


def greedy_bijection_loss(preds, truths) -> tuple:
    """Return ``(loss, assignment)``; the loss is the summed matched MSE over ``s``."""
    if len(preds) != len(truths) or len(preds) == 0:
        raise ContractError(f"need equal, nonempty sets; got {len(preds)} and {len(truths)}")
    sim = pairwise_mse(preds, truths)
    assignment = greedy_assignment(sim)
    loss = sum(sim[i, j] for i, j in enumerate(assignment)) / len(assignment)
    return float(loss), assignment


def hungarian(cost) -> list:
    """Minimum-cost perfect matching (shortest augmenting path with potentials)."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ContractError(f"cost matrix must be square, got {cost.shape}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[col] = row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=int)
    for row in range(1, n + 1):
        match[0] = row
        col0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[col0] = True
            r = match[col0]
            delta, col1 = np.inf, 0
            for c in range(1, n + 1):
                if used[c]:
                    continue
                cur = cost[r - 1, c - 1] - u[r] - v[c]
                if cur < minv[c]:
                    minv[c] = cur
                    way[c] = col0
                if minv[c] < delta:
                    delta, col1 = minv[c], c
            for c in range(n + 1):
                if used[c]:
                    u[match[c]] += delta
                    v[c] -= delta
                else:
                    minv[c] -= delta
            col0 = col1
            if match[col0] == 0:
                break
        while col0:
            prev = way[col0]
            match[col0] = match[prev]
            col0 = prev
    assignment = [0] * n
    for c in range(1, n + 1):
        assignment[match[c] - 1] = c - 1
    return assignment


def hungarian_loss(sim) -> tuple:
    sim = np.asarray(sim, dtype=np.float64)
    assignment = hungarian(sim)
    loss = sum(sim[i, j] for i, j in enumerate(assignment)) / len(assignment)
    return float(loss), assignment


def bijection_loss(pred: Tensor, truth) -> tuple:
    """Differentiable batched greedy loss.

    ``pred`` is ``(B, W, H, s)`` and ``truth`` an array of the same shape.
    Each item's assignment is computed on the current values and then held
    fixed, so gradients flow only through the selected MSE terms. Returns
    ``(mean loss over the batch, per-item assignments)``.
    """
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 4:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} must match as (B, W, H, s)")
    aligned = np.empty_like(truth, dtype=pred.dtype)
    assignments = []
    for b in range(pred.shape[0]):
        p = np.moveaxis(pred.data[b], -1, 0)
        t = np.moveaxis(truth[b], -1, 0)
        perm = greedy_assignment(pairwise_mse(p, t))
        assignments.append(perm)
        aligned[b] = truth[b][..., perm]
    diff = pred - Tensor(aligned)
    # mean over W*H*s equals the per-item sum of matched MSEs divided by s
    return mean(mul(diff, diff)), assignments
