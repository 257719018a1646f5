"""Centered STFT / overlap-add iSTFT on the real||imag spectrogram layout.

A spectrogram is a ``W x H`` matrix: one row per frame, the first ``H/2``
columns hold real parts and the last ``H/2`` the imaginary parts of the
``n_fft/2 + 1`` one-sided bins.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import PcmClip
from .errors import ConfigError, NonInvertibleError, ShapeError

_DUMP_HEADER = struct.Struct("<IIIIIQ")


@dataclass(frozen=True)
class StftParams:
    n_fft: int = 256
    hop: int = 192
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.hop <= 0:
            raise ConfigError(f"hop must be positive, got {self.hop}")
        if self.window not in ("hann", "rect"):
            raise ConfigError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def height(self) -> int:
        return 2 * self.n_bins

    def n_frames(self, length: int) -> int:
        return length // self.hop + 1

    def get_window(self) -> np.ndarray:
        if self.window == "rect":
            return np.ones(self.n_fft)
        # periodic Hann
        n = np.arange(self.n_fft)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.n_fft)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    data: np.ndarray
    n_fft: int
    hop: int
    sample_rate: int
    original_length: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] % 2:
            raise ShapeError(f"spectrogram data must be W x (even H), got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def params(self) -> StftParams:
        return StftParams(self.n_fft, self.hop)

    def complex(self) -> np.ndarray:
        half = self.data.shape[1] // 2
        return self.data[:, :half] + 1j * self.data[:, half:]

    def with_data(self, data) -> "Spectrogram":
        return Spectrogram(np.asarray(data), self.n_fft, self.hop, self.sample_rate, self.original_length)


def stft_array(x, params: StftParams = StftParams()) -> np.ndarray:
    """STFT of a raw 1-D array; returns the ``W x H`` real||imag matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"expected a nonempty 1-D signal, got shape {x.shape}")
    pad = params.n_fft // 2
    padded = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    n_frames = params.n_frames(x.size)
    idx = np.arange(params.n_fft)[None, :] + params.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * params.get_window()
    spec = np.fft.rfft(frames, axis=1)
    return np.concatenate([spec.real, spec.imag], axis=1)


def stft(clip: PcmClip, params: StftParams = StftParams()) -> Spectrogram:
    data = stft_array(clip.samples, params)
    return Spectrogram(data, params.n_fft, params.hop, clip.sample_rate, len(clip))


def istft_array(data, params: StftParams, length: int, floor: float = 0.0) -> np.ndarray:
    """Least-squares overlap-add inverse.

    With ``floor > 0`` the window-overlap sum is clamped from below, which
    damps samples with little coverage instead of amplifying whatever error
    an inconsistent spectrogram carries there.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != params.height:
        raise ShapeError(f"spectrogram shape {data.shape} does not match H={params.height}")
    n_frames = data.shape[0]
    half = params.n_bins
    frames = np.fft.irfft(data[:, :half] + 1j * data[:, half:], n=params.n_fft, axis=1)
    win = params.get_window()
    total = params.n_fft + params.hop * (n_frames - 1)
    out = np.zeros(total)
    wsum = np.zeros(total)
    for k in range(n_frames):
        s = k * params.hop
        out[s : s + params.n_fft] += frames[k] * win
        wsum[s : s + params.n_fft] += win * win
    pad = params.n_fft // 2
    keep = slice(pad, pad + length)
    out = np.pad(out, (0, max(0, pad + length - total)))[keep]
    wsum = np.pad(wsum, (0, max(0, pad + length - total)))[keep]
    if floor > 0:
        return out / np.maximum(wsum, floor)
    if np.any(wsum < 1e-8):
        bad = int(np.argmax(wsum < 1e-8))
        raise NonInvertibleError(
            f"window overlap vanishes at sample {bad} (n_fft={params.n_fft}, hop={params.hop}, "
            f"length={length})"
        )
    return out / wsum


def istft(spec: Spectrogram, class_id=None) -> PcmClip:
    """Inverse transform truncated to ``original_length``.

    Samples are clamped into [-1, 1] so the result is a valid clip; use
    :func:`istft_array` for the unclamped signal.
    """
    x = istft_array(spec.data, spec.params, spec.original_length)
    return PcmClip(np.clip(x, -1.0, 1.0), spec.sample_rate, class_id)


def linearity_check(a: PcmClip, b: PcmClip, params: StftParams = StftParams()) -> float:
    """Max deviation of ``stft(a + b)`` from ``stft(a) + stft(b)``."""
    if len(a) != len(b) or a.sample_rate != b.sample_rate:
        raise ShapeError(
            f"clips differ: {len(a)}@{a.sample_rate} Hz vs {len(b)}@{b.sample_rate} Hz"
        )
    joint = stft_array(a.samples + b.samples, params)
    parts = stft_array(a.samples, params) + stft_array(b.samples, params)
    return float(np.max(np.abs(joint - parts)))


def save_spectrogram(spec: Spectrogram, path) -> None:
    """Flat little-endian dump: fixed header then W*H float32, time-major."""
    w, h = spec.data.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(w, h, spec.n_fft, spec.hop, spec.sample_rate, spec.original_length))
        fh.write(np.ascontiguousarray(spec.data, dtype="<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise ShapeError(f"{path}: truncated spectrogram header")
    w, h, n_fft, hop, rate, length = _DUMP_HEADER.unpack_from(raw, 0)
    body = raw[_DUMP_HEADER.size :]
    if len(body) != 4 * w * h:
        raise ShapeError(f"{path}: expected {w}x{h} floats, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(w, h).astype(np.float64)
    return Spectrogram(data, n_fft, hop, rate, length)
