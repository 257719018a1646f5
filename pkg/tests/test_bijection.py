from itertools import permutations

import numpy as np
import pytest

from wildmix.autodiff import Tensor, check_gradients
from wildmix.bijection import (
    bijection_loss,
    greedy_assignment,
    greedy_bijection_loss,
    hungarian,
    hungarian_loss,
    pairwise_mse,
)
from wildmix.errors import ContractError, ShapeError


def brute_force(sim):
    sim = np.asarray(sim)
    n = sim.shape[0]
    return min(sum(sim[i, p[i]] for i in range(n)) / n for p in permutations(range(n)))


def scalar_loop_mse(a, b):
    total = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (x - y) * (x - y)
    return total / np.size(a)


def test_pairwise_matches_scalar_loop():
    rng = np.random.default_rng(0)
    preds = [rng.normal(size=(3, 4)) for _ in range(2)]
    truths = [rng.normal(size=(3, 4)) for _ in range(2)]
    sim = pairwise_mse(preds, truths)
    for i in range(2):
        for j in range(2):
            assert abs(sim[i, j] - scalar_loop_mse(preds[i], truths[j])) <= 1e-12


def test_pairwise_simple_cases():
    a = np.ones((2, 3))
    assert np.all(np.diag(pairwise_mse([a, 2 * a], [a, 2 * a])) == 0)
    assert pairwise_mse([np.zeros((4, 4))], [np.full((4, 4), 1.5)])[0, 0] == pytest.approx(2.25)
    with pytest.raises(ShapeError):
        pairwise_mse([np.zeros((2, 2))], [np.zeros((2, 3))])


def test_greedy_is_suboptimal_on_the_hand_example():
    sim = np.array([[1.0, 2.0], [0.5, 3.0]])
    assert greedy_assignment(sim) == [0, 1]
    loss = sum(sim[i, j] for i, j in enumerate(greedy_assignment(sim))) / 2
    assert loss == 2.0
    assert hungarian_loss(sim) == (1.25, [1, 0])
    assert brute_force(sim) == 1.25


def test_ties_go_to_smallest_index():
    assert greedy_assignment(np.ones((3, 3))) == [0, 1, 2]
    assert greedy_assignment([[0.0, 0.0], [5.0, 0.0]]) == [0, 1]


def test_permuted_sets_give_zero_loss():
    rng = np.random.default_rng(1)
    truths = [rng.normal(size=(5, 6)) for _ in range(4)]
    perm = [2, 0, 3, 1]
    loss, assignment = greedy_bijection_loss([truths[p] for p in perm], truths)
    assert loss == 0.0
    assert assignment == perm


@pytest.mark.parametrize("s", [2, 3, 5])
def test_greedy_dominates_hungarian(s):
    rng = np.random.default_rng(s)
    for _ in range(1000):
        sim = rng.uniform(0, 1, (s, s))
        g = sum(sim[i, j] for i, j in enumerate(greedy_assignment(sim))) / s
        h, assignment = hungarian_loss(sim)
        assert g >= h - 1e-15
        assert sorted(assignment) == list(range(s))


def test_hungarian_matches_exhaustive_s3():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        sim = rng.uniform(0, 1, (3, 3))
        assert hungarian_loss(sim)[0] == pytest.approx(brute_force(sim), abs=1e-12)


@pytest.mark.parametrize("s", [2, 3, 5])
def test_diagonal_dominant_agreement(s):
    rng = np.random.default_rng(10 + s)
    for _ in range(200):
        sim = rng.uniform(1, 2, (s, s))
        sim[np.diag_indices(s)] = rng.uniform(0, 0.9, s)
        assert greedy_assignment(sim) == list(range(s)) == hungarian(sim)
        assert hungarian_loss(sim)[0] == pytest.approx(np.trace(sim) / s, abs=1e-15)


def test_scale_law():
    rng = np.random.default_rng(3)
    preds = [rng.normal(size=(4, 4)) for _ in range(3)]
    truths = [rng.normal(size=(4, 4)) for _ in range(3)]
    base, perm = greedy_bijection_loss(preds, truths)
    scaled, perm2 = greedy_bijection_loss([3 * p for p in preds], [3 * t for t in truths])
    assert scaled == pytest.approx(9 * base, rel=1e-12)
    assert perm == perm2


def test_mismatched_sets():
    with pytest.raises(ContractError):
        greedy_bijection_loss([np.zeros(2)], [np.zeros(2), np.zeros(2)])
    with pytest.raises(ContractError):
        greedy_assignment(np.zeros((2, 3)))


def test_batched_loss_matches_reference():
    rng = np.random.default_rng(4)
    pred = rng.normal(size=(3, 5, 6, 2))
    truth = rng.normal(size=(3, 5, 6, 2))
    loss, assignments = bijection_loss(Tensor(pred, dtype=np.float64), truth)
    expected = []
    for b in range(3):
        l, a = greedy_bijection_loss([pred[b, ..., k] for k in range(2)],
                                     [truth[b, ..., k] for k in range(2)])
        expected.append(l)
        assert a == assignments[b]
    assert loss.item() == pytest.approx(np.mean(expected), rel=1e-12)


def test_batched_loss_gradient():
    rng = np.random.default_rng(5)
    pred = Tensor(rng.normal(size=(2, 3, 4, 3)), requires_grad=True, dtype=np.float64)
    truth = rng.normal(size=(2, 3, 4, 3))
    err = check_gradients(lambda: bijection_loss(pred, truth)[0], [pred], h=1e-6,
                          numeric_dtype=np.longdouble)
    assert err <= 1e-7


def test_batched_loss_shape_error():
    with pytest.raises(ShapeError):
        bijection_loss(Tensor(np.zeros((1, 2, 3, 2))), np.zeros((1, 2, 3, 3)))
