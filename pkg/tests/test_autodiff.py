import numpy as np
import pytest

from wildmix.autodiff import (
    Adam,
    AdamState,
    Conv1d,
    Tensor,
    adam_step,
    backward,
    conv1d_same,
    dropout,
    layer_norm,
    matmul,
    parameter,
    relu,
    softmax,
    sum_,
)
from wildmix.autodiff.checkpoint import load_tensors, save_tensors
from wildmix.autodiff.tensor import unbroadcast
from wildmix.errors import ConfigError, ContractError, DoubleBackwardError, IncompatibleCheckpointError
from wildmix.gradsuite import OP_TOLERANCE, check_ops


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_finite_differences(seed):
    for result in check_ops(seed):
        assert result.max_rel_error <= OP_TOLERANCE, result


def test_matmul_against_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out = matmul(t64(a), t64(b)).data
    for i in range(3):
        for j in range(2):
            assert out[i, j] == pytest.approx(sum(a[i, k] * b[k, j] for k in range(4)), abs=1e-12)


def test_relu_and_softmax_values():
    assert relu(t64([-2.0, 0.0, 3.0])).data.tolist() == [0.0, 0.0, 3.0]
    x = np.array([1.0, 2.0, 3.0])
    expected = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(softmax(t64(x)).data, expected, rtol=1e-14)
    # large logits do not overflow
    big = softmax(t64([1000.0, 1000.0])).data
    np.testing.assert_allclose(big, [0.5, 0.5])
    with pytest.raises(ConfigError):
        softmax(t64(np.zeros((2, 0))))


def test_layer_norm_standardizes():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 5.0, size=(6, 16))
    y = layer_norm(t64(x), t64(np.ones(16)), t64(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-6)
    shifted = layer_norm(t64(2 * x + 7), t64(np.ones(16)), t64(np.zeros(16))).data
    np.testing.assert_allclose(shifted, y, atol=1e-9)


def test_conv_keeps_length_and_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, 3))
    w = rng.normal(size=(3, 3, 2))
    out = conv1d_same(t64(x), t64(w)).data
    assert out.shape == (9, 2)
    padded = np.vstack([np.zeros((1, 3)), x, np.zeros((1, 3))])
    for t in range(9):
        ref = sum(padded[t + j] @ w[j] for j in range(3))
        np.testing.assert_allclose(out[t], ref, atol=1e-12)
    even = Conv1d(4, 3, 5, rng)(t64(rng.normal(size=(2, 7, 3))))
    assert even.shape == (2, 7, 5)


def test_dropout_identity_and_scaling():
    x = t64(np.ones((50, 40)))
    assert dropout(x, 0.5, train=False) is x
    assert dropout(x, 0.0, train=True) is x
    y = dropout(x, 0.25, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ConfigError):
        dropout(x, 1.0, True)


def test_unbroadcast():
    g = np.ones((4, 3, 2))
    assert unbroadcast(g, (3, 1)).tolist() == [[8.0]] * 3
    assert unbroadcast(g, (2,)).tolist() == [12.0, 12.0]


def test_backward_contracts():
    a = t64([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        backward(a * 2.0)
    loss = sum_(a * a)
    backward(loss)
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])
    with pytest.raises(DoubleBackwardError):
        backward(loss)
    with pytest.raises(ContractError):
        backward(sum_(t64([1.0])))


def test_shared_leaf_accumulates():
    a = t64([3.0], grad=True)
    backward(sum_(a * a + a * 2.0))
    assert a.grad.tolist() == [8.0]


def test_adam_first_step_is_lr_times_sign():
    p = parameter(np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 1e-3])
    state = AdamState(lr=0.01)
    adam_step([p], state)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-5)
    assert p.grad is None and state.t == 1


def test_adam_zero_lr_leaves_params_untouched():
    p = parameter(np.array([1.0, 2.0]))
    before = p.data.copy()
    state = AdamState(lr=0.0)
    for _ in range(5):
        p.grad = np.array([1.0, -1.0])
        adam_step([p], state)
    assert p.data.tobytes() == before.tobytes()


def test_adam_requires_grads():
    with pytest.raises(ContractError):
        adam_step([parameter(np.zeros(2))], AdamState())


def test_adam_minimizes_a_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    opt = Adam([p], lr=0.05)
    for _ in range(1000):
        diff = p - Tensor(target, dtype=np.float64)
        backward(sum_(diff * diff))
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32([1.5])}
    save_tensors(tmp_path / "x.ckpt", tensors, {"note": "hi"})
    header, back = load_tensors(tmp_path / "x.ckpt")
    assert header == {"note": "hi"}
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    (tmp_path / "bad.ckpt").write_bytes(b"nope\n")
    with pytest.raises(IncompatibleCheckpointError):
        load_tensors(tmp_path / "bad.ckpt")
