"""Training, evaluation, checkpoints and end-user separation.

A run draws batches from a materialized :class:`SpectrogramSet`, minimizes
the greedy bijection loss with Adam and keeps the checkpoint with the best
validation loss. Every evaluation row also carries the mixture-projection
loss on the same set so progress can be read against the worst case.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import Corpus, PcmClip, read_wav, write_wav
from .autodiff import AdamState, adam_step, set_default_dtype
from .autodiff.checkpoint import load_tensors, save_tensors
from .bijection import bijection_loss, greedy_bijection_loss
from .dsp import StftParams, istft_array, stft_array
from .errors import (
    ConfigError,
    DivergedRunError,
    EmptyDatasetError,
    IncompatibleCheckpointError,
    SampleRateError,
    ShapeError,
)
from .forge import DatasetManifest, SubdatasetId, build_subdataset, regenerate, render_record
from .stt import GRID, ABLATION_VARIANTS, SttConfig, SttModel

log = logging.getLogger(__name__)

LEARNING_RATES = GRID["lr"]


@dataclass
class TrainConfig:
    """Everything needed to reproduce a run.

    ``counts`` are the (train, validation, test) mixture counts; the desk
    profile keeps a full run within minutes on one CPU. ``stream`` renders
    mixtures per batch instead of holding them all in memory.
    """

    policy: str = "Hybrid"
    s: int = 2
    stt: SttConfig = field(default_factory=lambda: SttConfig(H=130, W=84, H_e=64))
    lr: float = 1e-3
    batch_size: int = 8
    max_steps: int = 2000
    eval_every: int = 100
    seed: int = 0
    deterministic: bool = False
    sample_rate: int = 8000
    duration: float = 1.0
    n_fft: int = 128
    hop: int = 96
    counts: tuple = (200, 40, 40)
    stream: bool = False

    def __post_init__(self):
        if isinstance(self.stt, dict):
            self.stt = SttConfig.from_dict(self.stt)
        self.counts = tuple(int(c) for c in self.counts)
        self.validate()

    def validate(self):
        SubdatasetId(self.policy, self.s, "tr")
        if self.stt.s != self.s:
            raise ConfigError(f"model emits {self.stt.s} sources but the task has {self.s}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be positive, max_steps >= 0")
        if len(self.counts) != 3 or min(self.counts) < 1:
            raise ConfigError(f"counts must be three positive integers, got {self.counts}")
        params = self.stft_params
        length = self.n_samples
        if (params.n_frames(length), params.height) != (self.stt.W, self.stt.H):
            raise ConfigError(
                f"a {length}-sample clip gives {params.n_frames(length)}x{params.height} "
                f"spectrograms but the model expects {self.stt.W}x{self.stt.H}"
            )

    @property
    def stft_params(self) -> StftParams:
        return StftParams(self.n_fft, self.hop)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    def subdataset(self, fold: str) -> SubdatasetId:
        return SubdatasetId(self.policy, self.s, fold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stt"] = self.stt.to_dict()
        d["counts"] = list(self.counts)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def desk_profile(**overrides) -> TrainConfig:
    """8 kHz, 1 s mixtures, n_fft 128, hop 96 (84 x 130 spectrograms)."""
    s = overrides.get("s", 2)
    stt = overrides.pop("stt", None) or SttConfig(H=130, W=84, H_e=64, s=s)
    return TrainConfig(stt=stt, **overrides)


def paper_profile(**overrides) -> TrainConfig:
    """44.1 kHz, 2 s mixtures, n_fft 256, hop 192 (460 x 258 spectrograms).

    Mixtures are rendered per batch; up to 50k of them would not fit in memory.
    """
    s = overrides.get("s", 2)
    base = dict(sample_rate=44100, duration=2.0, n_fft=256, hop=192,
                counts=(10_000 * s, 1_000 * s, 1_000 * s), stream=True)
    base.update(overrides)
    stt = base.pop("stt", None) or SttConfig(s=s)
    return TrainConfig(stt=stt, **base)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass
class SpectrogramSet:
    """Mixture spectrograms ``(N, W, H)`` and source spectrograms ``(N, W, H, s)``."""

    mixtures: np.ndarray
    sources: np.ndarray

    def __len__(self):
        return self.mixtures.shape[0]

    def __post_init__(self):
        if self.sources.shape[:-1] != self.mixtures.shape:
            raise ShapeError(f"sources {self.sources.shape} do not match mixtures {self.mixtures.shape}")

    @classmethod
    def from_records(cls, records, params: StftParams) -> "SpectrogramSet":
        mixtures, sources = [], []
        for rec in records:
            mixtures.append(stft_array(rec.mixture.samples, params))
            sources.append(np.stack([stft_array(src.samples, params) for src in rec.sources], -1))
        if not mixtures:
            return cls(np.zeros((0, 0, 0)), np.zeros((0, 0, 0, 0)))
        return cls(np.stack(mixtures), np.stack(sources))

    def subset(self, index) -> "SpectrogramSet":
        return SpectrogramSet(self.mixtures[index], self.sources[index])

    @property
    def frame_shape(self) -> tuple:
        return self.mixtures.shape[1:]

    @property
    def n_sources(self) -> int:
        return self.sources.shape[-1]

    def batch(self, index) -> tuple:
        return self.mixtures[index], self.sources[index]


class StreamingSet:
    """Renders manifest records on demand instead of holding every spectrogram.

    Same ``batch`` interface as :class:`SpectrogramSet`; meant for
    paper-scale subdatasets that do not fit in memory.
    """

    def __init__(self, corpus: Corpus, manifest: DatasetManifest, params: StftParams):
        if manifest.corpus_hash != corpus.digest():
            raise ConfigError("corpus digest does not match the manifest")
        self.corpus, self.manifest, self.params = corpus, manifest, params
        n = int(round(manifest.length * manifest.sample_rate))
        self.frame_shape = (params.n_frames(n), params.height)
        self.n_sources = manifest.subdataset.s

    def __len__(self):
        return len(self.manifest)

    def batch(self, index) -> tuple:
        fold = self.manifest.subdataset.f
        recs = [render_record(self.corpus, fold, self.manifest.records[int(i)], self.manifest.length,
                              self.manifest.truncate) for i in np.atleast_1d(index)]
        data = SpectrogramSet.from_records(recs, self.params)
        return data.mixtures, data.sources


def _check_corpus(cfg: TrainConfig, corpus: Corpus) -> None:
    if corpus.sample_rate != cfg.sample_rate:
        raise SampleRateError(f"corpus is {corpus.sample_rate} Hz but the run expects {cfg.sample_rate} Hz")


def make_manifest(cfg: TrainConfig, corpus: Corpus, fold: str) -> DatasetManifest:
    """Plan the ``fold`` subdataset of a run; seeds differ per fold."""
    _check_corpus(cfg, corpus)
    count = cfg.counts[("tr", "vl", "te").index(fold)]
    master = cfg.seed * 3 + ("tr", "vl", "te").index(fold)
    manifest, _ = build_subdataset(corpus, cfg.subdataset(fold), count, master, cfg.duration)
    return manifest


def load_set(cfg: TrainConfig, corpus: Corpus, manifest: DatasetManifest):
    if cfg.stream:
        return StreamingSet(corpus, manifest, cfg.stft_params)
    return SpectrogramSet.from_records(regenerate(corpus, manifest), cfg.stft_params)


def load_subdataset_dir(base, params: StftParams, sample_rate: int | None = None) -> SpectrogramSet:
    """Read a subdataset written by :func:`forge.write_subdataset` (16-bit audio)."""
    base = Path(base)
    manifest = DatasetManifest.load(base / "manifest.jsonl")
    mixtures, sources = [], []
    for meta in manifest.records:
        d = base / f"{meta.record_id:06d}"
        mix = read_wav(d / "mixture.wav")
        if sample_rate is not None and mix.sample_rate != sample_rate:
            raise SampleRateError(f"{d} is {mix.sample_rate} Hz; expected {sample_rate} Hz")
        mixtures.append(stft_array(mix.samples, params))
        srcs = [read_wav(d / f"source_{k}.wav").samples for k in range(len(meta.placements))]
        sources.append(np.stack([stft_array(x, params) for x in srcs], -1))
    if not mixtures:
        return SpectrogramSet(np.zeros((0, 0, 0)), np.zeros((0, 0, 0, 0)))
    return SpectrogramSet(np.stack(mixtures), np.stack(sources))


# --------------------------------------------------------------------------
# Checkpoints and logs
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    train: TrainConfig
    state: dict
    step: int = 0
    val_loss: float = float("nan")

    @property
    def stt(self) -> SttConfig:
        return self.train.stt

    def model(self) -> SttModel:
        model = SttModel(self.stt)
        try:
            model.load_state(self.state)
        except ShapeError as exc:
            raise IncompatibleCheckpointError(str(exc)) from exc
        return model

    def save(self, path) -> None:
        header = {
            "train": self.train.to_dict(),
            "stt_digest": self.stt.digest(),
            "step": self.step,
            "val_loss": self.val_loss,
        }
        save_tensors(path, self.state, header)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, state = load_tensors(path)
        try:
            train = TrainConfig.from_dict(header["train"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise IncompatibleCheckpointError(f"{path}: unreadable config ({exc})") from exc
        if train.stt.digest() != header.get("stt_digest"):
            raise IncompatibleCheckpointError(f"{path}: model config digest mismatch")
        ckpt = cls(train, state, header.get("step", 0), header.get("val_loss", float("nan")))
        ckpt.model()  # shape check against the config
        return ckpt


def snapshot(model: SttModel, cfg: TrainConfig, step: int, val_loss=float("nan")) -> Checkpoint:
    return Checkpoint(cfg, {k: v.copy() for k, v in model.state_dict().items()}, step, val_loss)


@dataclass
class RunLog:
    """Training rows ``{"step", "loss"}`` and evaluation rows ``{"step", "val_loss", "baseline"}``."""

    rows: list = field(default_factory=list)
    keep_time: bool = True

    def _append(self, row: dict, t0: float) -> None:
        if self.rows and row["step"] < self.rows[-1]["step"]:
            raise ConfigError("log steps must not decrease")
        row["time"] = round(time.perf_counter() - t0, 3) if self.keep_time else 0.0
        self.rows.append(row)

    def train_rows(self) -> list:
        return [r for r in self.rows if "loss" in r]

    def eval_rows(self) -> list:
        return [r for r in self.rows if "val_loss" in r]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path) -> "RunLog":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line])


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    loss: float
    baseline: float
    count: int


def _per_item_losses(pred: np.ndarray, truth: np.ndarray) -> list:
    out = []
    for p, t in zip(pred, truth):
        preds = [p[..., k] for k in range(p.shape[-1])]
        truths = [t[..., k] for k in range(t.shape[-1])]
        out.append(greedy_bijection_loss(preds, truths)[0])
    return out


def projection_loss(data: SpectrogramSet) -> float:
    """Mean greedy loss when every predicted source is the mixture itself."""
    if len(data) == 0:
        raise EmptyDatasetError("no mixtures to evaluate")
    losses = []
    for i in range(0, len(data), 16):
        x, y = data.batch(np.arange(i, min(i + 16, len(data))))
        losses.extend(_per_item_losses(np.repeat(x[..., None], y.shape[-1], axis=-1), y))
    return float(np.mean(losses))


def evaluate(model, data: SpectrogramSet, batch_size: int = 16) -> EvalResult:
    """Mean per-mixture greedy loss with dropout off, next to the projection baseline.

    ``model`` may be an :class:`SttModel` or a :class:`Checkpoint`.
    """
    if isinstance(model, Checkpoint):
        model = model.model()
    if len(data) == 0:
        raise EmptyDatasetError("no mixtures to evaluate")
    cfg = model.config
    if tuple(data.frame_shape) != (cfg.W, cfg.H) or data.n_sources != cfg.s:
        raise IncompatibleCheckpointError(
            f"model expects {cfg.W}x{cfg.H} with {cfg.s} sources, data is "
            f"{tuple(data.frame_shape)} with {data.n_sources}"
        )
    losses = []
    for i in range(0, len(data), batch_size):
        x, y = data.batch(np.arange(i, min(i + batch_size, len(data))))
        pred = model.forward(x, train=False).data
        losses.extend(_per_item_losses(pred.astype(np.float64), y))
    return EvalResult(float(np.mean(losses)), projection_loss(data), len(data))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng):
    """Endless stream of index batches; reshuffled every pass."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]


def train(cfg: TrainConfig, corpus: Corpus | None = None, train_set: SpectrogramSet | None = None,
          val_set: SpectrogramSet | None = None, out_dir=None, on_eval=None) -> tuple:
    """Run ``cfg.max_steps`` Adam steps; return ``(best checkpoint, RunLog)``.

    Sets default to the run's planned subdatasets built from ``corpus``.
    With ``out_dir`` the best checkpoint and the log are written there.
    ``on_eval(step, result)`` sees every evaluation; a truthy return ends
    the run after that evaluation.
    """
    if train_set is None or val_set is None:
        if corpus is None:
            raise ConfigError("either a corpus or explicit train and validation sets are needed")
        if train_set is None:
            train_set = load_set(cfg, corpus, make_manifest(cfg, corpus, "tr"))
        if val_set is None:
            val_set = load_set(cfg, corpus, make_manifest(cfg, corpus, "vl"))
    if len(train_set) == 0:
        raise EmptyDatasetError("training set is empty")
    set_default_dtype(np.float32)
    model = SttModel(cfg.stt)
    state = AdamState(lr=cfg.lr)
    params = model.parameters()
    rng = np.random.default_rng([cfg.seed, 11])
    batches = _batches(len(train_set), cfg.batch_size, rng)
    runlog = RunLog(keep_time=not cfg.deterministic)
    t0 = time.perf_counter()

    stop = False

    def run_eval(step):
        nonlocal stop
        result = evaluate(model, val_set)
        runlog._append({"step": step, "val_loss": result.loss, "baseline": result.baseline}, t0)
        if on_eval is not None:
            stop = bool(on_eval(step, result))
        return result

    best = snapshot(model, cfg, 0, run_eval(0).loss)
    last_good = best
    for step in range(1, cfg.max_steps + 1):
        x, y = train_set.batch(next(batches))
        loss, _ = bijection_loss(model.forward(x.astype(np.float32), train=True), y.astype(np.float32))
        value = loss.item()
        if not np.isfinite(value):
            runlog._append({"step": step, "loss": value}, t0)
            raise DivergedRunError(f"non-finite loss {value} at step {step}", last_good, runlog)
        loss.backward()
        adam_step(params, state)
        runlog._append({"step": step, "loss": value}, t0)
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            result = run_eval(step)
            last_good = snapshot(model, cfg, step, result.loss)
            if result.loss < best.val_loss:
                best = last_good
            if stop:
                break
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        best.save(out / "best.ckpt")
        runlog.save(out / "runlog.jsonl")
        cfg.save(out / "config.json")
    return best, runlog


# --------------------------------------------------------------------------
# Separation
# --------------------------------------------------------------------------


# below the interior overlap minimum of the desk and paper profiles (0.043),
# so only ragged tile edges are affected
SEPARATION_FLOOR = 0.01


def separate_samples(ckpt: Checkpoint, samples: np.ndarray, model: SttModel | None = None) -> list:
    """Split ``samples`` into fixed-length tiles and separate each; returns ``s`` arrays."""
    cfg = ckpt.train
    model = model or ckpt.model()
    tile = cfg.n_samples
    n = len(samples)
    n_tiles = max(1, -(-n // tile))
    padded = np.zeros(n_tiles * tile)
    padded[:n] = samples
    params = cfg.stft_params
    specs = np.stack([stft_array(padded[i * tile : (i + 1) * tile], params) for i in range(n_tiles)])
    pred = model.forward(specs, train=False).data.astype(np.float64)
    out = []
    for k in range(cfg.s):
        tiles = [istft_array(pred[i, ..., k], params, tile, SEPARATION_FLOOR) for i in range(n_tiles)]
        out.append(np.clip(np.concatenate(tiles)[:n], -1.0, 1.0))
    return out


def separate(ckpt: Checkpoint, wav_path, out_dir, s: int | None = None) -> list:
    """Write ``source_<k>.wav`` for each separated source; returns their paths."""
    cfg = ckpt.train
    if s is not None and s != cfg.s:
        raise ConfigError(f"checkpoint separates {cfg.s} sources, {s} requested")
    clip = read_wav(wav_path)
    if clip.sample_rate != cfg.sample_rate:
        raise SampleRateError(f"{wav_path} is {clip.sample_rate} Hz; the model needs {cfg.sample_rate} Hz")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, samples in enumerate(separate_samples(ckpt, clip.samples)):
        path = out / f"source_{k}.wav"
        write_wav(PcmClip(samples, cfg.sample_rate), path)
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# Ablations
# --------------------------------------------------------------------------


def ablate(cfg: TrainConfig, train_set: SpectrogramSet, val_set: SpectrogramSet,
           variants=ABLATION_VARIANTS, steps: int = 100) -> list:
    """Train each variant for ``steps`` steps on shared data; one summary row per variant."""
    rows = []
    for variant in variants:
        vcfg = copy.deepcopy(cfg)
        vcfg.stt = cfg.stt.replace(ablation=variant)
        vcfg.max_steps = steps
        vcfg.eval_every = max(steps, 1)
        best, runlog = train(vcfg, train_set=train_set, val_set=val_set)
        census = SttModel(vcfg.stt).census()
        last = runlog.eval_rows()[-1]
        rows.append({
            "variant": variant,
            "parameters": census["total"],
            "tp": census["tp"],
            "sp": census["sp"],
            "ff2": census["ff2"],
            "train_loss": runlog.train_rows()[-1]["loss"] if runlog.train_rows() else float("nan"),
            "val_loss": last["val_loss"],
            "baseline": last["baseline"],
        })
    return rows


def format_table(rows: list) -> str:
    cols = ("variant", "parameters", "train_loss", "val_loss", "baseline")
    lines = ["  ".join(f"{c:>12}" for c in cols)]
    for r in rows:
        cells = [f"{r[c]:>12.4f}" if isinstance(r[c], float) else f"{r[c]:>12}" for c in cols]
        lines.append("  ".join(cells))
    return "\n".join(lines)
