"""Mono PCM clips, RIFF/WAVE reading and writing, and the synthetic corpus.

The synthetic corpus stands in for a recorded one: every class is a fixed
parametric sound family so that tests get class-distinguishable,
license-free audio with no downloads.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyClipError, UnsupportedCodecError, WavFormatError

FOLDS = ("tr", "vl", "te")
DEFAULT_SAMPLE_RATE = 44100
SYNTH_PEAK = 0.9

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class PcmClip:
    """A mono waveform with samples in [-1, 1].

    ``index`` is the clip's position inside its class/fold list when the clip
    belongs to a corpus; it is provenance only.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    class_id: int | None = None
    fold: str | None = None
    index: int | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ConfigError(f"clip samples must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise EmptyClipError("clip has no samples")
        if not np.all(np.isfinite(samples)) or np.max(np.abs(samples)) > 1.0:
            raise ConfigError("clip samples must be finite and lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")
        if self.fold is not None and self.fold not in FOLDS:
            raise ConfigError(f"unknown fold {self.fold!r}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> "PcmClip":
        return PcmClip(samples, self.sample_rate, self.class_id, self.fold, self.index)


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path, class_id=None, fold=None) -> PcmClip:
    """Read a PCM WAV file; multichannel input keeps channel 0 only.

    Supports 8/16/24/32-bit integer and 32-bit float encodings. Integer
    samples are rescaled by ``2**(bits-1)`` so they land in [-1, 1).
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise WavFormatError(f"{path}: truncated extensible fmt chunk")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    codec, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0 or bits == 0:
        raise WavFormatError(f"{path}: invalid fmt fields")
    width = bits // 8
    if block_align != channels * width:
        raise WavFormatError(f"{path}: block align {block_align} inconsistent with format")

    if codec == _WAVE_FORMAT_PCM and bits in (8, 16, 24, 32):
        pass
    elif codec == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedCodecError(f"{path}: format tag {codec:#06x} with {bits} bits")

    n_frames = len(payload) // block_align
    if n_frames == 0:
        raise EmptyClipError(f"{path}: empty data chunk")
    raw = np.frombuffer(payload[: n_frames * block_align], dtype=np.uint8)
    raw = raw.reshape(n_frames, channels, width)[:, 0, :]

    if codec == _WAVE_FORMAT_IEEE_FLOAT:
        samples = raw.copy().view("<f4").ravel().astype(np.float64)
        samples = np.clip(np.nan_to_num(samples), -1.0, 1.0)
    elif bits == 8:
        samples = (raw[:, 0].astype(np.float64) - 128.0) / 128.0
    elif bits == 24:
        b = raw.astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints / float(1 << 23)
    else:
        dtype = "<i2" if bits == 16 else "<i4"
        samples = raw.copy().view(dtype).ravel() / float(1 << (bits - 1))
    return PcmClip(samples, int(rate), class_id, fold)


def quantize16(samples) -> np.ndarray:
    """Clamp to [-1, 1] and map to int16 with a 2**15 scale (1.0 saturates)."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(clip: PcmClip, path) -> None:
    """Write ``clip`` as 16-bit PCM mono."""
    pcm = quantize16(clip.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pcm)


# --------------------------------------------------------------------------
# Corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    n_classes: int = 25
    n_per_class: int = 60
    fold_sizes: tuple = (40, 10, 10)
    duration_range: tuple = (0.25, 1.0)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    mixture_length: float = 2.0

    def validate(self):
        if self.n_classes < 1 or self.n_per_class < 1:
            raise ConfigError("corpus needs at least one class and one clip per class")
        if len(self.fold_sizes) != 3 or min(self.fold_sizes) < 0:
            raise ConfigError(f"fold sizes must be three non-negative counts, got {self.fold_sizes}")
        if sum(self.fold_sizes) != self.n_per_class:
            raise ConfigError(
                f"fold sizes {tuple(self.fold_sizes)} do not sum to n_per_class={self.n_per_class}"
            )
        lo, hi = self.duration_range
        if not (0 < lo <= hi <= self.mixture_length):
            raise ConfigError(
                f"duration range {self.duration_range} outside (0, {self.mixture_length}]"
            )
        if self.sample_rate <= 0:
            raise ConfigError("sample rate must be positive")
        if int(round(lo * self.sample_rate)) < 1:
            raise ConfigError("shortest clip would have no samples")


@dataclass
class Corpus:
    """Clips grouped as ``classes[class_id][fold] -> list[PcmClip]``."""

    classes: dict
    sample_rate: int
    _digest: str | None = field(default=None, repr=False, compare=False)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_per_class(self) -> int:
        counts = {sum(len(v) for v in folds.values()) for folds in self.classes.values()}
        return counts.pop() if len(counts) == 1 else max(counts)

    @property
    def class_ids(self) -> list:
        return sorted(self.classes)

    def fold(self, class_id: int, fold: str) -> list:
        return self.classes[class_id].get(fold, [])

    def clip(self, class_id: int, fold: str, index: int) -> PcmClip:
        return self.classes[class_id][fold][index]

    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            h.update(struct.pack("<I", self.sample_rate))
            for cid in self.class_ids:
                for f in FOLDS:
                    for clip in self.fold(cid, f):
                        h.update(f"{cid}/{f}/{clip.samples.size};".encode())
                        h.update(clip.samples.tobytes())
            self._digest = h.hexdigest()
        return self._digest


def load_corpus_dir(root) -> Corpus:
    """Load ``<root>/<class_id>/<fold>/*.wav`` (files sorted by name)."""
    root = Path(root)
    classes = {}
    rate = None
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            cid = int(class_dir.name)
        except ValueError:
            raise ConfigError(f"class directory {class_dir.name!r} is not an integer id") from None
        classes[cid] = {}
        for f in FOLDS:
            clips = []
            for i, wav in enumerate(sorted((class_dir / f).glob("*.wav"))):
                clip = read_wav(wav)
                if rate is None:
                    rate = clip.sample_rate
                elif clip.sample_rate != rate:
                    raise ConfigError(f"{wav}: sample rate {clip.sample_rate} != corpus rate {rate}")
                clips.append(PcmClip(clip.samples, rate, cid, f, i))
            classes[cid][f] = clips
    if not classes or rate is None:
        raise ConfigError(f"no clips found under {root}")
    return Corpus(classes, rate)


def save_corpus_dir(corpus: Corpus, root) -> None:
    root = Path(root)
    for cid in corpus.class_ids:
        for f in FOLDS:
            d = root / str(cid) / f
            d.mkdir(parents=True, exist_ok=True)
            for i, clip in enumerate(corpus.fold(cid, f)):
                write_wav(clip, d / f"{i:04d}.wav")


# Synthetic families, cycled over class ids.
FAMILIES = ("tone", "chirp", "am_tone", "noise_burst", "pulse_train")


def _envelope(n, rate, rng):
    t = np.arange(n) / rate
    attack = rng.uniform(0.005, 0.05)
    decay = rng.uniform(0.15, 1.5)
    env = np.minimum(t / attack, 1.0) * np.exp(-t / decay)
    release = min(n, int(0.01 * rate))
    if release > 1:
        env[-release:] *= np.linspace(1.0, 0.0, release)
    return env


def _band_noise(n, rate, lo, hi, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _synth_clip(class_idx: int, n: int, rate: int, rng) -> np.ndarray:
    family = FAMILIES[class_idx % len(FAMILIES)]
    band = class_idx // len(FAMILIES)
    nyq = rate / 2.0
    # class base pitch rises with band; clip pitch jitters within +-15%
    base = min(180.0 * 1.6 ** (band % 6), 0.3 * nyq)
    f0 = base * rng.uniform(0.85, 1.15)
    t = np.arange(n) / rate
    if family == "tone":
        x = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, 4) if k * f0 < nyq)
    elif family == "chirp":
        ratio = 2.0 if band % 2 == 0 else 0.5
        dur = n / rate
        inst = f0 * ratio ** (t / dur)
        x = np.sin(2 * np.pi * np.cumsum(inst) / rate)
    elif family == "am_tone":
        fm = rng.uniform(3.0, 12.0)
        x = np.sin(2 * np.pi * f0 * t) * (1.0 + 0.8 * np.sin(2 * np.pi * fm * t))
    elif family == "noise_burst":
        x = _band_noise(n, rate, 0.7 * f0, min(1.6 * f0, nyq), rng)
    else:
        period = max(2, int(rate / rng.uniform(6.0, 20.0)))
        click = np.sin(2 * np.pi * f0 * t[: min(n, period)]) * np.exp(-t[: min(n, period)] * 60.0)
        x = np.zeros(n)
        for start in range(0, n, period):
            seg = click[: n - start]
            x[start : start + seg.size] += seg
    x = np.asarray(x, dtype=np.float64) * _envelope(n, rate, rng)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= SYNTH_PEAK / peak
    return x


def gen_synthetic_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Build a deterministic corpus of parametric sounds, one family per class."""
    spec.validate()
    lo, hi = spec.duration_range
    rate = spec.sample_rate
    classes = {}
    for c in range(spec.n_classes):
        cid = c + 1
        folds = {f: [] for f in FOLDS}
        bounds = np.cumsum((0,) + tuple(spec.fold_sizes))
        for j in range(spec.n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, cid, j]))
            n = int(round(rng.uniform(lo, hi) * rate))
            n = min(max(n, int(np.ceil(lo * rate))), int(np.floor(hi * rate)))
            fi = int(np.searchsorted(bounds, j, side="right")) - 1
            f = FOLDS[fi]
            samples = _synth_clip(c, n, rate, rng)
            folds[f].append(PcmClip(samples, rate, cid, f, len(folds[f])))
        classes[cid] = folds
    return Corpus(classes, rate)
