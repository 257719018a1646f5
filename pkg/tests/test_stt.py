import numpy as np
import pytest

from wildmix.autodiff import Tensor, backward, get_default_dtype, set_default_dtype
from wildmix.bijection import greedy_bijection_loss
from wildmix.dsp import Spectrogram
from wildmix.errors import ConfigError, ShapeError
from wildmix.stt import (
    GRID,
    ABLATION_VARIANTS,
    MaskedGeneration,
    STEPath,
    SttConfig,
    SttModel,
    desk_config,
    mixture_projection,
    sinusoidal_table,
    stt_forward,
)

TOY = dict(W=12, H=18, H_e=16, N_E=2, N_D=2, heads=2, s=2)


@pytest.fixture(autouse=True)
def float64():
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    yield
    set_default_dtype(previous)


def toy(**changes):
    return SttModel(SttConfig(**{**TOY, **changes}))


def test_grid_presets():
    assert GRID["n_layers"] == (2, 4, 6, 8)
    assert GRID["heads"] == (1, 2, 4)
    assert GRID["dropout"] == (0.0, 0.2, 0.5)
    assert GRID["lr"] == (0.001, 0.0005, 0.0001)


@pytest.mark.parametrize("changes", [
    dict(H_e=15), dict(N_E=0), dict(N_D=0), dict(ablation="wide"), dict(dropout=1.0),
    dict(cnn_spec=((3, 8),)), dict(H=17),
])
def test_config_rejects(changes):
    with pytest.raises(ConfigError):
        SttConfig(**{**TOY, **changes})


def test_config_roundtrip_and_digest():
    cfg = SttConfig(**TOY, cnn_spec=((5, 8), (3, 0)))
    back = SttConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.digest() == cfg.digest()
    assert cfg.replace(heads=4).digest() != cfg.digest()


def test_forward_shapes():
    model = toy()
    x = np.random.default_rng(0).normal(size=(3, 12, 18))
    assert model.forward(x).shape == (3, 12, 18, 2)
    assert model.forward(x[0]).shape == (12, 18, 2)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((12, 20)))


def test_desk_forward_shape():
    model = SttModel(desk_config(H_e=16))
    assert model.forward(np.zeros((1, 84, 130))).shape == (1, 84, 130, 2)


def test_embedding_positional_cases():
    model = toy()
    model.embedding.weight.data[:] = 0
    model.embedding.bias.data[:] = 0
    out = model.embed(np.zeros((12, 18))).data
    np.testing.assert_allclose(out, sinusoidal_table(12, 16), atol=1e-15)

    model = toy()
    col = np.random.default_rng(1).normal(size=18)
    out = model.embed(np.tile(col, (12, 1))).data
    assert out.shape == (12, 16)
    assert not np.allclose(out[2], out[7])


def test_ste_path_shape_and_no_cnn():
    cfg = SttConfig(**TOY)
    rng = np.random.default_rng(0)
    path = STEPath(16, cfg, rng)
    x = Tensor(rng.normal(size=(12, 16)))
    assert path(x).shape == (12, 16)
    assert len(path.convs) == 2
    assert STEPath(16, cfg, rng, use_cnn=False).convs == []
    with pytest.raises(ShapeError):
        path(Tensor(np.zeros((12, 15))))


def test_ste_path_with_silent_attention_and_ff_is_a_norm():
    cfg = SttConfig(**TOY)
    rng = np.random.default_rng(2)
    path = STEPath(16, cfg, rng, use_cnn=False)
    for name in ("wv", "bv", "wo", "bo"):
        path.msa.proj[name].data[:] = 0
    path.ff.outer.weight.data[:] = 0
    path.ff.outer.bias.data[:] = 0
    x = rng.normal(2.0, 3.0, size=(12, 16))
    xc = x - x.mean(axis=-1, keepdims=True)
    expected = xc / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + 1e-8)
    np.testing.assert_allclose(path(Tensor(x)).data, expected, atol=1e-7)


def test_tp_only_is_the_temporal_path():
    model = toy(ablation="tp-only")
    ste = model.encoders[0]
    x = Tensor(np.random.default_rng(3).normal(size=(12, 16)))
    np.testing.assert_array_equal(ste(x).data, ste.paths[0](x).data)


def test_full_ste_sums_transposed_spectral_path():
    model = toy()
    ste = model.encoders[0]
    x = Tensor(np.random.default_rng(4).normal(size=(12, 16)))
    tp, sp = ste.paths
    expected = tp(x).data + sp(Tensor(x.data.T)).data.T
    np.testing.assert_allclose(ste(x).data, expected, atol=1e-14)


def test_ablation_census():
    full = toy().census()
    census = {v: toy(ablation=v).census() for v in ABLATION_VARIANTS}
    assert census["tp-only"]["sp"] == 0 and census["tp-only"]["tp"] == full["tp"]
    assert census["sp-only"]["tp"] == 0 and census["sp-only"]["sp"] == full["sp"]
    assert census["tp-double"]["tp"] == 2 * full["tp"] and census["tp-double"]["sp"] == 0
    assert census["sp-double"]["sp"] == 2 * full["sp"] and census["sp-double"]["tp"] == 0
    assert census["no-CNN"]["cnn"] == 0 and full["cnn"] > 0
    assert census["no-MGN"]["ff2"] == 0 and full["ff2"] == (18 * 2) ** 2 + 18 * 2
    for c in [full, *census.values()]:
        parts = c["embedding"] + c["tp"] + c["sp"] + c["decoder"] + c["ff1"] + c["ff2"]
        assert parts == c["total"]
    # a pure function of the config
    assert toy(seed=5).census() == toy(seed=9).census()


def test_tp_double_paths_are_independent():
    ste = toy(ablation="tp-double").encoders[0]
    a, b = ste.paths
    assert not np.array_equal(a.msa.proj["wq"].data, b.msa.proj["wq"].data)


@pytest.mark.parametrize("n_d", [1, 4])
def test_decoder_depths(n_d):
    model = toy(N_D=n_d)
    memory = Tensor(np.random.default_rng(5).normal(size=(12, 16)))
    out, weights = model.decode(memory, return_weights=True)
    assert out.shape == (12, 16)
    assert len(weights) == n_d
    for w in weights:
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


def test_decoder_on_zero_memory_is_finite():
    model = toy()
    assert np.all(np.isfinite(model.decode(Tensor(np.zeros((12, 16)))).data))


def test_mgn_identity_and_dead_mask():
    cfg = SttConfig(**TOY)
    mgn = MaskedGeneration(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(12, 16)))
    ff1 = mgn.ff1(x).data.reshape(12, 18, 2)
    mgn.ff2.weight.data[:] = 0
    mgn.ff2.bias.data[:] = 1
    np.testing.assert_array_equal(mgn(x).data, ff1)
    mgn.ff2.bias.data[:] = -1
    assert not np.any(mgn(x).data)


def test_mgn_mask_nonnegative_at_full_shape():
    cfg = SttConfig(H=258, W=460, H_e=16, s=3)
    mgn = MaskedGeneration(cfg, np.random.default_rng(0))
    out, mask = mgn(Tensor(np.random.default_rng(2).normal(size=(460, 16))), return_mask=True)
    assert out.shape == (460, 258, 3)
    assert np.all(mask.data >= 0)


def test_no_mgn_returns_ff1():
    model = toy(ablation="no-MGN")
    x = Tensor(np.random.default_rng(3).normal(size=(12, 16)))
    np.testing.assert_array_equal(model.mgn(x).data, model.mgn.ff1(x).data.reshape(12, 18, 2))


def test_forward_backward_is_reproducible():
    x = np.random.default_rng(6).normal(size=(2, 12, 18))
    runs = []
    for _ in range(2):
        model = toy(seed=3)
        out = model.forward(x)
        backward((out * out).mean())
        runs.append((out.data.tobytes(), [p.grad.tobytes() for p in model.parameters()]))
    assert runs[0] == runs[1]


def test_dropout_changes_training_forward_only():
    model = toy(dropout=0.5)
    x = np.random.default_rng(7).normal(size=(12, 18))
    np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)
    assert not np.array_equal(model.forward(x, train=True).data, model.forward(x).data)


def test_every_variant_runs_forward_and_backward():
    x = np.random.default_rng(8).normal(size=(2, 12, 18))
    for variant in ABLATION_VARIANTS:
        model = toy(ablation=variant)
        out = model.forward(x, train=True)
        backward((out * out).mean())
        assert all(p.grad is not None for p in model.parameters())


def test_stt_forward_slices_sources():
    model = toy(s=3)
    spec = Spectrogram(np.random.default_rng(9).normal(size=(12, 18)), 16, 4, 8000, 44)
    outs = stt_forward(spec, model)
    assert len(outs) == 3
    assert all(o.shape == (12, 18) and o.original_length == 44 for o in outs)


def test_mixture_projection():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(12, 18))
    mixture = Spectrogram(a.copy(), 16, 4, 8000, 44)
    copies = mixture_projection(mixture, 2)
    assert len(copies) == 2
    assert all(np.array_equal(c.data, a) for c in copies)
    silent = np.zeros_like(a)
    loss, assignment = greedy_bijection_loss([c.data for c in copies], [a, silent])
    # pred 0 claims the real source at zero cost; pred 1 pays MSE(mixture, silence)
    assert assignment == [0, 1]
    assert loss == pytest.approx(np.mean(a ** 2) / 2, rel=1e-12)
