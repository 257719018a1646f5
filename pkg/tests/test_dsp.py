import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wildmix.audio_io import PcmClip
from wildmix.dsp import (
    Spectrogram,
    StftParams,
    istft,
    istft_array,
    linearity_check,
    load_spectrogram,
    save_spectrogram,
    stft,
    stft_array,
)
from wildmix.errors import ConfigError, NonInvertibleError, ShapeError

DESK = StftParams(128, 96)


def invertible(length, params):
    # the last frame must still cover the final kept sample
    return length % params.hop <= params.n_fft // 2


def test_full_profile_shape():
    spec = stft(PcmClip(np.zeros(88200), 44100))
    assert spec.shape == (460, 258)


@pytest.mark.parametrize("length", [1, 5, 127, 128, 1000, 8000])
def test_shape_law(length):
    data = stft_array(np.linspace(-0.5, 0.5, length), DESK)
    assert data.shape == (length // 96 + 1, 128 + 2)


def test_zero_clip_zero_spectrogram():
    assert not np.any(stft(PcmClip(np.zeros(1000), 8000), DESK).data)


def test_tone_peak_bin():
    rate, n_fft = 44100, 256
    t = np.arange(88200) / rate
    spec = stft(PcmClip(0.5 * np.sin(2 * np.pi * 1000 * t), rate))
    mag = np.abs(spec.complex())
    assert np.all(np.argmax(mag[2:-2], axis=1) == round(1000 * n_fft / rate))


def test_frame_matches_naive_dft():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 1000)
    data = stft_array(x, DESK)
    padded = np.pad(x, 64, mode="reflect")
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(128) / 128)
    for frame in (0, 3, 10):
        seg = padded[frame * 96 : frame * 96 + 128] * win
        k = np.arange(65)[:, None]
        n = np.arange(128)[None, :]
        dft = (seg[None, :] * np.exp(-2j * np.pi * k * n / 128)).sum(axis=1)
        np.testing.assert_allclose(data[frame, :65], dft.real, atol=1e-10)
        np.testing.assert_allclose(data[frame, 65:], dft.imag, atol=1e-10)


def test_roundtrip_random_clips():
    rng = np.random.default_rng(1)
    for _ in range(20):
        length = int(rng.integers(128, 5000))
        if not invertible(length, DESK):
            continue
        x = rng.uniform(-1, 1, length)
        y = istft_array(stft_array(x, DESK), DESK, length)
        assert np.max(np.abs(y - x)) <= 1e-6 * np.max(np.abs(x))


def test_istft_returns_clip():
    x = np.sin(np.arange(8000) / 7.0) * 0.5
    clip = istft(stft(PcmClip(x, 8000), DESK))
    assert len(clip) == 8000 and clip.sample_rate == 8000
    assert np.max(np.abs(clip.samples - x)) < 1e-9


def test_zero_spectrogram_inverts_to_silence():
    spec = Spectrogram(np.zeros((84, 130)), 128, 96, 8000, 8000)
    assert not np.any(istft(spec).samples)


def test_shift_oracle():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, 4000)
    shifted = np.concatenate([[0.0], x[:-1]])
    y = istft_array(stft_array(shifted, DESK), DESK, x.size)
    np.testing.assert_allclose(y[1:], x[:-1], atol=1e-9)


def test_uncovered_tail_is_reported():
    # 95 = 96 - 1: the last frame stops 63 samples short of the end
    with pytest.raises(NonInvertibleError):
        istft_array(stft_array(np.ones(191) * 0.1, DESK), DESK, 191)


def test_bad_params():
    with pytest.raises(ConfigError):
        StftParams(n_fft=100)
    with pytest.raises(ConfigError):
        StftParams(hop=0)


def test_linearity():
    rng = np.random.default_rng(3)
    a = PcmClip(rng.uniform(-0.5, 0.5, 3000), 8000)
    assert linearity_check(a, PcmClip(np.zeros(3000), 8000), DESK) == 0.0
    neg = PcmClip(-a.samples, 8000)
    assert not np.any(stft_array(a.samples + neg.samples, DESK))
    for seed in range(20):
        r = np.random.default_rng(seed)
        a = PcmClip(r.uniform(-1, 1, 2000), 8000)
        b = PcmClip(r.uniform(-1, 1, 2000), 8000)
        assert linearity_check(a, b, DESK) <= 1e-9
    with pytest.raises(ShapeError):
        linearity_check(a, PcmClip(np.zeros(10), 8000), DESK)


@settings(max_examples=30, deadline=None)
@given(st.integers(128, 3000), st.integers(0, 2**31 - 1))
def test_perfect_reconstruction_property(length, seed):
    if not invertible(length, DESK):
        return
    x = np.random.default_rng(seed).uniform(-1, 1, length)
    y = istft_array(stft_array(x, DESK), DESK, length)
    assert np.max(np.abs(y - x)) <= 1e-6 * np.max(np.abs(x))


def test_dump_roundtrip(tmp_path):
    spec = stft(PcmClip(np.linspace(-1, 1, 900), 8000), DESK)
    save_spectrogram(spec, tmp_path / "s.bin")
    raw = (tmp_path / "s.bin").read_bytes()
    assert len(raw) == 28 + 4 * spec.data.size
    back = load_spectrogram(tmp_path / "s.bin")
    assert (back.n_fft, back.hop, back.sample_rate, back.original_length) == (128, 96, 8000, 900)
    np.testing.assert_allclose(back.data, spec.data, rtol=1e-6, atol=1e-6)


def test_istft_floor_damps_thin_edges_only():
    params = StftParams(32, 24)
    x = np.random.default_rng(3).uniform(-1, 1, 1000)
    spec = stft_array(x, params)
    exact = istft_array(spec, params, 1000)
    floored = istft_array(spec, params, 1000, floor=0.01)
    # interior coverage never drops below the floor; only the tail is touched
    np.testing.assert_allclose(floored[:-4], exact[:-4], atol=1e-12)
    noisy = spec + np.random.default_rng(4).normal(0, 0.1, spec.shape)
    assert np.max(np.abs(istft_array(noisy, params, 1000, floor=0.01))) < 50 * np.max(np.abs(noisy))
