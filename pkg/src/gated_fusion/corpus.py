"""Expert-embedding corpora: the on-disk store, synthetic generation and splits.

A store is a directory holding ``manifest.json`` plus one ``MMXE`` binary
file per trailer per expert::

    magic  b"MMXE"            4 bytes
    version                   u32
    expert-name length        u16, then UTF-8 bytes
    level                     u8   (0 frame-level, 1 clip-level)
    clip_count                u32
    native_dim                u32
    per clip: frame_count u32, then frame_count * native_dim float32

All integers and floats are little-endian.
"""

import json
import logging
import os
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConsistencyError, DomainError, FormatError
from .numeric.rng import seeded_rng

logger = logging.getLogger(__name__)

MAGIC = b"MMXE"
STORE_VERSION = 1
MANIFEST_NAME = "manifest.json"
MIN_CLIPS = 10
MAX_LABELS = 6

DEFAULT_GENRES = (
    "Action", "Adventure", "Animation", "Comedy", "Crime", "Documentary",
    "Drama", "Family", "Fantasy", "History", "Horror", "Music", "Mystery",
    "Science-Fiction", "Western", "Sport", "Short", "Biography", "Thriller",
    "War",
)

# Output widths of the pretrained extractors the store stands in for.
DEFAULT_EXPERT_DIMS = {"appearance": 2048, "scene": 1024, "motion": 1024, "audio": 128}

LEVELS = {"frame": 0, "clip": 1}
_LEVEL_NAMES = {v: k for k, v in LEVELS.items()}


@dataclass
class ExpertTrack:
    name: str
    native_dim: int
    clips: list
    level: str = "frame"

    @property
    def clip_count(self):
        return len(self.clips)

    def validate(self):
        for i, clip in enumerate(self.clips):
            if clip.ndim != 2 or clip.shape[1] != self.native_dim:
                raise ConsistencyError(
                    f"expert {self.name!r} clip {i} has shape {clip.shape}, "
                    f"expected (frames, {self.native_dim})")
            if clip.shape[0] < 1:
                raise ConsistencyError(f"expert {self.name!r} clip {i} has no frames")
            if self.level == "clip" and clip.shape[0] != 1:
                raise ConsistencyError(
                    f"clip-level expert {self.name!r} clip {i} has {clip.shape[0]} rows")


@dataclass
class TrailerRecord:
    trailer_id: str
    labels: np.ndarray
    tracks: dict
    title: str = ""
    year: int = 0
    substyles: dict = None
    clip_genres: list = None

    @property
    def clip_count(self):
        counts = {t.clip_count for t in self.tracks.values()}
        if len(counts) != 1:
            raise ConsistencyError(
                f"trailer {self.trailer_id!r}: experts disagree on clip count "
                + ", ".join(f"{n}={t.clip_count}" for n, t in self.tracks.items()))
        return counts.pop()

    @property
    def genre_indices(self):
        return [int(g) for g in np.flatnonzero(self.labels)]

    def primary_genre(self):
        """First listed genre. Synthetic trailers record it explicitly; otherwise
        the lowest labelled genre index is used."""
        if self.substyles and "primary" in self.substyles:
            return int(self.substyles["primary"])
        return self.genre_indices[0]

    def validate(self):
        if not self.tracks:
            raise ConsistencyError(f"trailer {self.trailer_id!r} has no expert tracks")
        n = int(np.sum(self.labels))
        if not 1 <= n <= MAX_LABELS:
            raise DomainError(
                f"trailer {self.trailer_id!r} has {n} labels; expected 1..{MAX_LABELS}")
        for track in self.tracks.values():
            track.validate()
        return self.clip_count


@dataclass
class Corpus:
    genres: list
    records: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self):
        return [r.trailer_id for r in self.records]

    @property
    def expert_names(self):
        return list(self.records[0].tracks) if self.records else []

    def expert_dims(self):
        if not self.records:
            return {}
        return {n: t.native_dim for n, t in self.records[0].tracks.items()}

    def expert_levels(self):
        if not self.records:
            return {}
        return {n: t.level for n, t in self.records[0].tracks.items()}

    def labels(self):
        return np.stack([r.labels for r in self.records]).astype(np.int64)

    def subset(self, ids):
        index = {r.trailer_id: r for r in self.records}
        missing = [i for i in ids if i not in index]
        if missing:
            raise KeyError(f"unknown trailer ids: {missing[:5]}")
        return Corpus(self.genres, [index[i] for i in ids], dict(self.metadata))


# ---------------------------------------------------------------------------
# binary track files

def encode_track(track):
    name = track.name.encode("utf-8")
    parts = [MAGIC, struct.pack("<IH", STORE_VERSION, len(name)), name,
             struct.pack("<BII", LEVELS[track.level], track.clip_count, track.native_dim)]
    for clip in track.clips:
        parts.append(struct.pack("<I", clip.shape[0]))
        parts.append(np.ascontiguousarray(clip, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_track(data, source="<bytes>"):
    def need(offset, size, what):
        if offset + size > len(data):
            raise FormatError(
                f"{source}: truncated while reading {what} at offset {offset}")

    need(0, 4, "magic")
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r} at offset 0")
    need(4, 6, "header")
    version, name_len = struct.unpack_from("<IH", data, 4)
    if version != STORE_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    offset = 10
    need(offset, name_len, "expert name")
    name = data[offset:offset + name_len].decode("utf-8")
    offset += name_len
    need(offset, 9, "track header")
    level, clip_count, native_dim = struct.unpack_from("<BII", data, offset)
    if level not in _LEVEL_NAMES:
        raise FormatError(f"{source}: unknown level flag {level} at offset {offset}")
    offset += 9
    clips = []
    for i in range(clip_count):
        need(offset, 4, f"frame count of clip {i}")
        (frames,) = struct.unpack_from("<I", data, offset)
        offset += 4
        nbytes = frames * native_dim * 4
        need(offset, nbytes, f"values of clip {i}")
        values = np.frombuffer(data, dtype="<f4", count=frames * native_dim, offset=offset)
        clips.append(values.reshape(frames, native_dim).astype(np.float32))
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{source}: {len(data) - offset} trailing bytes at offset {offset}")
    return ExpertTrack(name, native_dim, clips, _LEVEL_NAMES[level])


_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def _track_path(trailer_id, expert):
    return f"tracks/{_SAFE.sub('_', trailer_id)}/{_SAFE.sub('_', expert)}.mmxe"


def _manifest_entry(record, files):
    entry = {
        "id": record.trailer_id,
        "title": record.title,
        "year": int(record.year),
        "labels": [int(v) for v in record.labels],
        "clip_count": record.clip_count,
        "files": files,
    }
    if record.substyles is not None:
        entry["substyles"] = record.substyles
    if record.clip_genres is not None:
        entry["clip_genres"] = [int(g) for g in record.clip_genres]
    return entry


def write_store(corpus, path):
    """Write ``corpus`` as a store directory at ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ids = corpus.ids
    if len(set(ids)) != len(ids):
        raise ConsistencyError("trailer ids are not unique")
    entries = []
    experts = {}
    for record in corpus.records:
        record.validate()
        files = {}
        for name, track in record.tracks.items():
            experts.setdefault(name, {"name": name, "native_dim": track.native_dim,
                                      "level": track.level})
            rel = _track_path(record.trailer_id, name)
            target = path / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(encode_track(track))
            files[name] = rel
        entries.append(_manifest_entry(record, files))
    manifest = {
        "format": "mmx-embedding-store",
        "version": STORE_VERSION,
        "genres": list(corpus.genres),
        "experts": list(experts.values()),
        "metadata": corpus.metadata,
        "trailers": entries,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    path = Path(path)
    mpath = path / MANIFEST_NAME
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from None
    if manifest.get("version") != STORE_VERSION:
        raise FormatError(f"{mpath}: unsupported store version {manifest.get('version')}")
    return manifest


def load_store(path, ids=None):
    """Load a store directory; ``ids`` restricts loading to those trailers."""
    path = Path(path)
    manifest = read_manifest(path)
    wanted = None if ids is None else set(ids)
    records = []
    for entry in manifest["trailers"]:
        if wanted is not None and entry["id"] not in wanted:
            continue
        tracks = {}
        for expert, rel in entry["files"].items():
            fpath = path / rel
            try:
                data = fpath.read_bytes()
            except FileNotFoundError:
                raise FormatError(f"{fpath}: track file missing") from None
            track = decode_track(data, source=str(fpath))
            if track.name != expert:
                raise FormatError(f"{fpath}: holds expert {track.name!r}, manifest says {expert!r}")
            tracks[expert] = track
        record = TrailerRecord(
            trailer_id=entry["id"], title=entry.get("title", ""),
            year=int(entry.get("year", 0)),
            labels=np.asarray(entry["labels"], dtype=np.int64), tracks=tracks,
            substyles=entry.get("substyles"), clip_genres=entry.get("clip_genres"))
        record.validate()
        if "clip_count" in entry and entry["clip_count"] != record.clip_count:
            raise ConsistencyError(
                f"trailer {record.trailer_id!r}: manifest clip_count {entry['clip_count']} "
                f"!= stored {record.clip_count}")
        records.append(record)
    return Corpus(list(manifest["genres"]), records, manifest.get("metadata", {}))


# ---------------------------------------------------------------------------
# synthetic corpora

@dataclass
class ExpertSpec:
    name: str
    native_dim: int
    frames: tuple = (2, 4)
    level: str = "frame"


def _default_experts():
    return [ExpertSpec("appearance", 48), ExpertSpec("scene", 32),
            ExpertSpec("motion", 32), ExpertSpec("audio", 16)]


@dataclass
class SyntheticSpec:
    """Recipe for a corpus with planted coarse genres and fine sub-styles.

    ``noise_sigma`` is the ratio of per-frame noise norm to signal norm.
    ``dominance`` is the weight of the clip's dominant genre when a trailer has
    several; ``persistence`` is the probability that consecutive clips share a
    dominant genre.
    """

    n_genres: int = 6
    substyles_per_genre: int = 2
    n_trailers: int = 300
    experts: list = field(default_factory=_default_experts)
    clips: tuple = (18, 40)
    cardinality_weights: tuple = (0.35, 0.3, 0.15, 0.1, 0.06, 0.04)
    noise_sigma: float = 0.5
    substyle_scale: float = 0.8
    dominance: float = 0.6
    persistence: float = 0.85
    noise_expert: bool = False
    noise_expert_dim: int = 32
    short_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.experts = [e if isinstance(e, ExpertSpec) else ExpertSpec(**e)
                        for e in self.experts]
        self.clips = tuple(self.clips)
        self.cardinality_weights = tuple(self.cardinality_weights)
        for e in self.experts:
            e.frames = tuple(e.frames)
        self.validate()

    def validate(self):
        if min(self.n_genres, self.substyles_per_genre, self.n_trailers) < 1:
            raise DomainError("synthetic counts must be positive")
        if not self.experts and not self.noise_expert:
            raise DomainError("at least one expert is required")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if not 1 <= self.clips[0] <= self.clips[1]:
            raise DomainError(f"bad clips range {self.clips}")
        if len(self.cardinality_weights) < 1 or min(self.cardinality_weights) < 0:
            raise DomainError("cardinality weights must be non-negative")
        for e in self.experts:
            if e.native_dim < 1 or not 1 <= e.frames[0] <= e.frames[1]:
                raise DomainError(f"bad expert spec {e}")

    def to_dict(self):
        return asdict(self)


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(spec):
    """Build an in-memory corpus from ``spec`` (deterministic in ``spec.seed``).

    Every trailer records, per labelled genre, its planted sub-style and the
    dominant genre of every clip so that retrieval and per-sequence tests
    have ground truth.
    """
    rng = seeded_rng(spec.seed)
    G = spec.n_genres
    K = spec.substyles_per_genre
    max_card = min(len(spec.cardinality_weights), MAX_LABELS, G)
    weights = np.asarray(spec.cardinality_weights[:max_card], dtype=float)
    weights = weights / weights.sum()

    prototypes = {}
    offsets = {}
    for e in spec.experts:
        prototypes[e.name] = _unit_rows(rng, G, e.native_dim)
        offsets[e.name] = spec.substyle_scale * _unit_rows(
            rng, G * K, e.native_dim).reshape(G, K, e.native_dim)

    genre_names = list(DEFAULT_GENRES[:G]) if G <= len(DEFAULT_GENRES) else [
        f"genre{g:02d}" for g in range(G)]
    records = []
    n_short = int(round(spec.short_fraction * spec.n_trailers))
    for t in range(spec.n_trailers):
        k = int(rng.choice(np.arange(1, max_card + 1), p=weights))
        genres = [int(g) for g in rng.choice(G, size=k, replace=False)]
        subs = [int(s) for s in rng.integers(0, K, size=k)]
        if t < n_short:
            n_clips = int(rng.integers(1, MIN_CLIPS))
        else:
            n_clips = int(rng.integers(spec.clips[0], spec.clips[1] + 1))

        dominant = np.empty(n_clips, dtype=np.int64)
        cur = int(rng.integers(k))
        for c in range(n_clips):
            if c > 0 and rng.random() >= spec.persistence:
                cur = int(rng.integers(k))
            dominant[c] = cur

        # mixing weights per clip over the trailer's genres
        mix = np.full((n_clips, k), 0.0)
        if k == 1:
            mix[:, 0] = 1.0
        else:
            mix[:] = (1.0 - spec.dominance) / (k - 1)
            mix[np.arange(n_clips), dominant] = spec.dominance

        tracks = {}
        for e in spec.experts:
            planted = prototypes[e.name][genres] + offsets[e.name][genres, subs]
            signal = mix @ planted
            signal /= np.linalg.norm(signal, axis=1, keepdims=True)
            scale = spec.noise_sigma / np.sqrt(e.native_dim)
            clips = []
            for c in range(n_clips):
                nf = 1 if e.level == "clip" else int(rng.integers(e.frames[0], e.frames[1] + 1))
                frames = signal[c] + scale * rng.standard_normal((nf, e.native_dim))
                clips.append(frames.astype(np.float32))
            tracks[e.name] = ExpertTrack(e.name, e.native_dim, clips, e.level)
        if spec.noise_expert:
            clips = [rng.standard_normal((2, spec.noise_expert_dim)).astype(np.float32)
                     for _ in range(n_clips)]
            tracks["noise"] = ExpertTrack("noise", spec.noise_expert_dim, clips, "frame")

        labels = np.zeros(G, dtype=np.int64)
        labels[genres] = 1
        records.append(TrailerRecord(
            trailer_id=f"t{t:05d}", title=f"synthetic trailer {t}", year=2000 + t % 20,
            labels=labels, tracks=tracks,
            substyles={"primary": genres[0],
                       "by_genre": {str(g): s for g, s in zip(genres, subs)}},
            clip_genres=[genres[d] for d in dominant]))
    return Corpus(genre_names, records, {"synthetic": spec.to_dict()})


def fine_label(record, substyles_per_genre):
    """Planted fine-grained class of a synthetic trailer: primary genre x its sub-style."""
    if record.substyles is None:
        raise DomainError(f"trailer {record.trailer_id!r} has no planted sub-styles")
    primary = int(record.substyles["primary"])
    return primary * substyles_per_genre + int(record.substyles["by_genre"][str(primary)])


# ---------------------------------------------------------------------------
# splitting

@dataclass
class SplitAssignment:
    train: list
    val: list
    test: list
    ratios: tuple = (0.8, 0.1, 0.1)
    excluded: list = field(default_factory=list)

    def to_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test,
                "ratios": list(self.ratios), "excluded": self.excluded}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["train"]), list(d["val"]), list(d["test"]),
                   tuple(d.get("ratios", (0.8, 0.1, 0.1))), list(d.get("excluded", [])))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def split_dataset(corpus, ratios=(0.8, 0.1, 0.1), seed=0, min_clips=MIN_CLIPS):
    """Drop trailers shorter than ``min_clips`` then shuffle and partition.

    Validation and test sizes are floored; the remainder goes to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DomainError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    kept, excluded = [], []
    for r in corpus.records:
        (kept if r.clip_count >= min_clips else excluded).append(r.trailer_id)
    if not kept:
        raise DomainError(f"no trailers with at least {min_clips} clips")
    if excluded:
        logger.info("excluded %d trailers with fewer than %d clips", len(excluded), min_clips)
    order = seeded_rng(seed).permutation(len(kept))
    shuffled = [kept[i] for i in order]
    n = len(shuffled)
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    return SplitAssignment(shuffled[:n_train], shuffled[n_train:n_train + n_val],
                           shuffled[n_train + n_val:], ratios, excluded)


def truncate_labels(corpus, seed=0):
    """Copy of ``corpus`` with one genre hidden from every multi-genre trailer.

    Returns the new corpus and a mapping trailer id -> hidden genre index.
    """
    rng = seeded_rng(seed)
    hidden = {}
    records = []
    for r in corpus.records:
        labels = r.labels.copy()
        idx = np.flatnonzero(labels)
        if len(idx) >= 2:
            g = int(idx[rng.integers(len(idx))])
            labels[g] = 0
            hidden[r.trailer_id] = g
        records.append(TrailerRecord(r.trailer_id, labels, r.tracks, r.title, r.year,
                                     r.substyles, r.clip_genres))
    return Corpus(corpus.genres, records, dict(corpus.metadata)), hidden


def store_exists(path):
    return os.path.exists(os.path.join(path, MANIFEST_NAME))
