"""Mixture synthesis: sampling policies, placement, mixing and manifests.

Every record is generated from a child seed derived from ``(master_seed,
record_id)`` so records can be produced in any order, in parallel, or
regenerated one at a time from a manifest.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .audio_io import FOLDS, Corpus, PcmClip, write_wav
from .errors import ConfigError, InsufficientCorpusError, OversizeClipError, ShapeError

log = logging.getLogger(__name__)

POLICIES = ("Interclass", "Intraclass", "Hybrid")
SOURCE_COUNTS = (2, 3, 5)
DEFAULT_LENGTH = 2.0
DEFAULT_EPSILON = 0.05
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SubdatasetId:
    u: str
    s: int
    f: str

    def __post_init__(self):
        if self.u not in POLICIES:
            raise ConfigError(f"unknown policy {self.u!r}; expected one of {POLICIES}")
        if self.f not in FOLDS:
            raise ConfigError(f"unknown fold {self.f!r}; expected one of {FOLDS}")
        if int(self.s) < 1:
            raise ConfigError(f"source count must be positive, got {self.s}")

    def default_count(self) -> int:
        return (10_000 if self.f == "tr" else 1_000) * self.s

    def path(self) -> Path:
        return Path(self.u) / str(self.s) / self.f


@dataclass(frozen=True)
class Placement:
    class_id: int
    clip_index: int
    start: float
    volume: float


@dataclass
class MixtureRecord:
    id: int
    seed: int
    placements: list
    mixture: PcmClip
    sources: list
    clamp_count: int


@dataclass
class RecordMeta:
    """The audio-free part of a record, as stored in a manifest."""

    record_id: int
    seed: int
    placements: list
    clamp_count: int | None = None

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "seed": self.seed,
            "sources": [asdict(p) for p in self.placements],
            "clamp_count": self.clamp_count,
        }

    @classmethod
    def from_json(cls, obj) -> "RecordMeta":
        return cls(
            obj["record_id"],
            obj["seed"],
            [Placement(**p) for p in obj["sources"]],
            obj.get("clamp_count"),
        )


@dataclass
class DatasetManifest:
    subdataset: SubdatasetId
    corpus_hash: str
    master_seed: int
    length: float = DEFAULT_LENGTH
    epsilon: float = DEFAULT_EPSILON
    sample_rate: int = 0
    truncate: bool = False
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def header(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "subdataset": asdict(self.subdataset),
            "corpus_hash": self.corpus_hash,
            "master_seed": self.master_seed,
            "length": self.length,
            "epsilon": self.epsilon,
            "sample_rate": self.sample_rate,
            "truncate": self.truncate,
        }

    def add(self, meta: RecordMeta) -> None:
        """Insert keeping records sorted by id; records may arrive out of order."""
        ids = [r.record_id for r in self.records]
        pos = int(np.searchsorted(ids, meta.record_id))
        if pos < len(ids) and ids[pos] == meta.record_id:
            self.records[pos] = meta
        else:
            self.records.insert(pos, meta)

    def save(self, path) -> None:
        """One JSON object per line: the header, then one line per record."""
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for r in sorted(self.records, key=lambda r: r.record_id):
                fh.write(json.dumps(r.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise ConfigError(f"{path}: empty manifest")
        head = json.loads(lines[0])
        if head.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"{path}: unsupported manifest version {head.get('version')}")
        m = cls(
            SubdatasetId(**head["subdataset"]),
            head["corpus_hash"],
            head["master_seed"],
            head["length"],
            head["epsilon"],
            head["sample_rate"],
            head["truncate"],
        )
        m.records = sorted((RecordMeta.from_json(json.loads(ln)) for ln in lines[1:]),
                           key=lambda r: r.record_id)
        return m


def derive_seed(master_seed: int, record_id: int) -> int:
    """Counter-based child seed, independent of generation order."""
    ss = np.random.SeedSequence([int(master_seed), int(record_id)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# Sampling policies
# --------------------------------------------------------------------------


def sample_interclass(corpus: Corpus, s: int, f: str, rng) -> list:
    """``s`` clips from ``s`` distinct classes, one uniform clip per class."""
    eligible = [c for c in corpus.class_ids if corpus.fold(c, f)]
    if len(eligible) < s:
        raise InsufficientCorpusError(
            f"Interclass needs {s} classes with fold {f!r} clips, corpus has {len(eligible)}"
        )
    chosen = rng.choice(len(eligible), size=s, replace=False)
    out = []
    for k in chosen:
        clips = corpus.fold(eligible[k], f)
        out.append(clips[int(rng.integers(len(clips)))])
    return out


def sample_intraclass(corpus: Corpus, s: int, f: str, rng) -> list:
    """``s`` distinct clips of one uniformly chosen class."""
    eligible = [c for c in corpus.class_ids if len(corpus.fold(c, f)) >= s]
    if not eligible:
        raise InsufficientCorpusError(f"Intraclass needs a class with >= {s} clips in fold {f!r}")
    clips = corpus.fold(eligible[int(rng.integers(len(eligible)))], f)
    return [clips[int(k)] for k in rng.choice(len(clips), size=s, replace=False)]


def sample_hybrid(corpus: Corpus, s: int, f: str, rng) -> list:
    """``s`` distinct clips drawn uniformly from the pooled fold; classes may repeat."""
    pool = [clip for c in corpus.class_ids for clip in corpus.fold(c, f)]
    if len(pool) < s:
        raise InsufficientCorpusError(f"Hybrid needs {s} clips in fold {f!r}, corpus has {len(pool)}")
    return [pool[int(k)] for k in rng.choice(len(pool), size=s, replace=False)]


SAMPLERS = {
    "Interclass": sample_interclass,
    "Intraclass": sample_intraclass,
    "Hybrid": sample_hybrid,
}


# --------------------------------------------------------------------------
# Placement and mixing
# --------------------------------------------------------------------------


def draw_placement(clip: PcmClip, length: float, epsilon: float, rng, truncate=False) -> Placement:
    """Random start and volume for one clip.

    By default the start is drawn from ``uniform(0, L - duration)`` so the
    clip fits entirely; ``truncate=True`` draws from ``uniform(0, L)`` and
    lets :func:`place_clip` cut whatever runs past the end.
    """
    upper = length if truncate else length - clip.duration
    if upper < 0:
        raise OversizeClipError(f"clip of {clip.duration:.3f} s exceeds mixture length {length} s")
    start = float(rng.uniform(0.0, upper))
    volume = float(rng.uniform(epsilon, 1.0))
    return Placement(clip.class_id, clip.index, start, volume)


def place_clip(clip: PcmClip, placement: Placement, length: float, truncate=False) -> PcmClip:
    """Full-length track: silence, the clip scaled by volume, silence."""
    n_total = int(round(length * clip.sample_rate))
    if len(clip) > n_total:
        raise OversizeClipError(f"clip has {len(clip)} samples, track holds {n_total}")
    begin = int(round(placement.start * clip.sample_rate))
    if begin < 0 or (not truncate and begin + len(clip) > n_total):
        raise OversizeClipError(
            f"placement at sample {begin} pushes a {len(clip)}-sample clip past {n_total}"
        )
    track = np.zeros(n_total)
    seg = clip.samples[: max(0, n_total - begin)] * placement.volume
    track[begin : begin + seg.size] = seg
    return PcmClip(track, clip.sample_rate, clip.class_id, clip.fold, clip.index)


def mix(sources) -> tuple:
    """Sample-wise sum clamped to [-1, 1]; returns ``(mixture, clamp_count)``."""
    if not sources:
        raise ShapeError("cannot mix an empty source list")
    n, rate = len(sources[0]), sources[0].sample_rate
    for src in sources[1:]:
        if len(src) != n or src.sample_rate != rate:
            raise ShapeError(f"source {len(src)}@{src.sample_rate} Hz differs from {n}@{rate} Hz")
    total = np.sum([src.samples for src in sources], axis=0)
    clamped = int(np.count_nonzero(np.abs(total) > 1.0))
    if clamped:
        log.debug("mixture clamped at %d samples", clamped)
    return PcmClip(np.clip(total, -1.0, 1.0), rate), clamped


# --------------------------------------------------------------------------
# Subdatasets
# --------------------------------------------------------------------------


def plan_record(corpus: Corpus, sid: SubdatasetId, record_id: int, master_seed: int,
                length=DEFAULT_LENGTH, epsilon=DEFAULT_EPSILON, truncate=False) -> RecordMeta:
    seed = derive_seed(master_seed, record_id)
    rng = np.random.default_rng(seed)
    clips = SAMPLERS[sid.u](corpus, sid.s, sid.f, rng)
    placements = [draw_placement(c, length, epsilon, rng, truncate) for c in clips]
    return RecordMeta(record_id, seed, placements)


def render_record(corpus: Corpus, fold: str, meta: RecordMeta, length=DEFAULT_LENGTH,
                  truncate=False) -> MixtureRecord:
    sources = [
        place_clip(corpus.clip(p.class_id, fold, p.clip_index), p, length, truncate)
        for p in meta.placements
    ]
    mixture, clamped = mix(sources)
    meta.clamp_count = clamped
    return MixtureRecord(meta.record_id, meta.seed, list(meta.placements), mixture, sources, clamped)


def build_subdataset(corpus: Corpus, sid: SubdatasetId, count: int | None = None,
                     master_seed: int = 0, length=DEFAULT_LENGTH, epsilon=DEFAULT_EPSILON,
                     truncate=False) -> tuple:
    """Plan ``count`` mixtures and return ``(manifest, lazy record stream)``.

    Placements are drawn up front (cheap); audio is rendered as the stream
    is consumed, which also fills in each record's clamp count.
    """
    if count is None:
        count = sid.default_count()
    if count <= 0:
        raise ConfigError(f"mixture count must be positive, got {count}")
    if not 0 < epsilon <= 1:
        raise ConfigError(f"volume floor must lie in (0, 1], got {epsilon}")
    manifest = DatasetManifest(sid, corpus.digest(), master_seed, length, epsilon,
                               corpus.sample_rate, truncate)
    for i in range(count):
        manifest.records.append(plan_record(corpus, sid, i, master_seed, length, epsilon, truncate))
    return manifest, regenerate(corpus, manifest)


def regenerate(corpus: Corpus, manifest: DatasetManifest) -> Iterator[MixtureRecord]:
    """Render the audio for every manifest record."""
    if manifest.corpus_hash != corpus.digest():
        raise ConfigError("corpus digest does not match the manifest")
    for meta in manifest.records:
        yield render_record(corpus, manifest.subdataset.f, meta, manifest.length, manifest.truncate)


def write_subdataset(root, manifest: DatasetManifest, records) -> Path:
    """Write ``<root>/<u>/<s>/<fold>/<record_id>/*.wav`` plus ``manifest.jsonl``."""
    base = Path(root) / manifest.subdataset.path()
    base.mkdir(parents=True, exist_ok=True)
    for rec in records:
        d = base / f"{rec.id:06d}"
        d.mkdir(exist_ok=True)
        write_wav(rec.mixture, d / "mixture.wav")
        for k, src in enumerate(rec.sources):
            write_wav(src, d / f"source_{k}.wav")
        manifest.add(RecordMeta(rec.id, rec.seed, rec.placements, rec.clamp_count))
    manifest.save(base / "manifest.jsonl")
    return base


def scan_policy(manifest: DatasetManifest) -> list:
    """Ids of records that violate the manifest's class policy."""
    bad = []
    for r in manifest.records:
        classes = [p.class_id for p in r.placements]
        if len(classes) != manifest.subdataset.s:
            bad.append(r.record_id)
        elif manifest.subdataset.u == "Interclass" and len(set(classes)) != len(classes):
            bad.append(r.record_id)
        elif manifest.subdataset.u == "Intraclass" and len(set(classes)) != 1:
            bad.append(r.record_id)
    return bad
