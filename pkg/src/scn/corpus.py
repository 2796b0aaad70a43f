"""Vocabulary, synthetic grounding corpus, and dataset file I/O.

Feature files are little-endian binary::

    b"SCNF" | version u32 | video count u32
    per video: id length u16 | UTF-8 id | n_v u32 | d u32 | n_v*d float32

Annotation files hold one JSON object per line with keys ``video_id``,
``tokens``, ``importance`` and ``gt`` (``[start, end]`` or null).
"""

from __future__ import annotations

import contextlib
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .temporal import Proposal

PAD, MASK, BOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<mask>", "<bos>", "<unk>")

FEATURE_MAGIC = b"SCNF"
FEATURE_VERSION = 1

DEFAULT_MAX_FRAMES = 200
DEFAULT_MAX_WORDS = 20

# Synthetic query material: one pattern word per query, the rest filler.
PATTERN_WORDS = (
    "jumping", "running", "cooking", "swimming", "dancing", "climbing",
    "reading", "throwing", "cycling", "painting", "singing", "rowing",
    "skating", "typing", "washing", "sweeping",
)
FILLER_WORDS = (
    "a", "the", "person", "someone", "man", "woman", "is", "starts",
    "then", "in", "video", "room", "again", "slowly", "outside", "now",
)
STOPWORDS = frozenset(
    "a an the is are was were be been to of in on at by for with and or then "
    "now again this that it its his her their there here from into up down".split()
)


class DatasetError(ValueError):
    """Malformed dataset file; the message names the offending record."""


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        self.itos: list[str] = list(tokens)
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def build_vocabulary(token_streams: Iterable[Iterable[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens after the specials.

    Ties in frequency are broken lexicographically.
    """
    if max_size < 5:
        raise ValueError(f"max_size must be >= 5, got {max_size}")
    counts: Counter[str] = Counter()
    for stream in token_streams:
        counts.update(stream)
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty token stream")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def stopword_importance(tokens: Sequence[str]) -> list[int]:
    """Fallback importance flags for corpora that ship without them."""
    return [0 if t.lower() in STOPWORDS else 1 for t in tokens]


# -- ground-truth access guard -------------------------------------------


class GroundTruthGuard:
    """Counts ``gt_interval`` reads made while a guarded section is active."""

    def __init__(self) -> None:
        self.active = 0
        self.reads = 0
        self.strict = False

    @contextlib.contextmanager
    def watching(self, strict: bool = False) -> Iterator["GroundTruthGuard"]:
        prev = self.strict
        self.active += 1
        self.strict = strict or prev
        try:
            yield self
        finally:
            self.active -= 1
            self.strict = prev

    def record(self, record: "QueryRecord") -> None:
        if self.active:
            self.reads += 1
            if self.strict:
                raise RuntimeError(f"ground truth of {record.video_id!r} read during training")


GT_GUARD = GroundTruthGuard()


@dataclass(eq=False)
class VideoRecord:
    video_id: str
    features: np.ndarray  # (n_v, d) float32

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=False)
class QueryRecord:
    """A query paired with one video.

    ``tokens`` are words; map them to ids with a :class:`Vocabulary`.
    The ground-truth interval is for evaluation only; reads inside
    ``GT_GUARD.watching()`` are counted.
    """

    video_id: str
    tokens: tuple[str, ...]
    importance: tuple[int, ...]
    _gt: Proposal | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.tokens = tuple(self.tokens)
        self.importance = tuple(int(x) for x in self.importance)
        if self._gt is not None:
            self._gt = Proposal(int(self._gt[0]), int(self._gt[1]))

    @property
    def gt_interval(self) -> Proposal | None:
        GT_GUARD.record(self)
        return self._gt

    @property
    def has_gt(self) -> bool:
        return self._gt is not None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QueryRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.tokens == other.tokens
            and self.importance == other.importance
            and self._gt == other._gt
        )


# -- synthetic corpus ------------------------------------------------------


@dataclass
class CorpusConfig:
    n_videos: int = 32
    feature_dim: int = 16
    min_frames: int = 40
    max_frames: int = 64
    event_ratio: float = 0.3
    vocab_size: int = 1000
    seed: int = 7
    n_patterns: int = 4
    signal: float = 5.0  # centroid norm
    noise: float = 0.5  # per-dimension std of frame noise
    distractor_rate: float = 0.0  # share of background frames centred on a random pattern

    def validate(self) -> None:
        if self.n_videos < 0:
            raise ValueError("n_videos must be >= 0")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if not 0.0 < self.event_ratio <= 1.0:
            raise ValueError("event_ratio must be in (0, 1]")
        if not 1 <= self.n_patterns <= len(PATTERN_WORDS):
            raise ValueError(f"n_patterns must be in 1..{len(PATTERN_WORDS)}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must be in [0, 1]")


_TEMPLATES = (
    ("a", "person", "is", None),
    ("someone", "starts", None, "in", "the", "room"),
    ("the", "man", "is", None, "again"),
    ("a", "woman", None, "slowly", "outside"),
    ("then", "someone", "is", None, "now"),
)


def pattern_centroids(config: CorpusConfig) -> np.ndarray:
    """Per-pattern feature centroids, shape ``(n_patterns, feature_dim)``.

    Centroids depend on the pattern and feature width only, so corpora drawn
    with different seeds share one pattern-to-feature mapping.
    """
    c = np.stack([
        np.random.default_rng([config.feature_dim, i]).standard_normal(config.feature_dim)
        for i in range(config.n_patterns)
    ])
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return c * config.signal


def event_length(n_frames: int, event_ratio: float) -> int:
    return max(1, int(np.floor(event_ratio * n_frames + 0.5)))


def generate_synthetic_corpus(
    config: CorpusConfig,
) -> tuple[list[VideoRecord], list[QueryRecord]]:
    """Background-noise videos, each with one embedded pattern segment.

    Background frames are i.i.d. from one fixed mixture: with probability
    ``distractor_rate`` a frame is noise around a uniformly chosen pattern
    centroid, otherwise noise around zero. Frames inside the event are noise
    around the query pattern's centroid. The paired query names the pattern
    (flagged important) surrounded by filler words.
    """
    config.validate()
    centroids = pattern_centroids(config)
    rng = np.random.default_rng([config.seed, 1])
    videos, queries = [], []
    for i in range(config.n_videos):
        n_v = int(rng.integers(config.min_frames, config.max_frames + 1))
        length = event_length(n_v, config.event_ratio)
        if length > n_v:
            raise ValueError(f"event of {length} frames does not fit in {n_v}")
        start = int(rng.integers(0, n_v - length + 1))
        pattern = int(rng.integers(config.n_patterns))
        feats = rng.standard_normal((n_v, config.feature_dim)) * config.noise
        distract = rng.random(n_v) < config.distractor_rate
        feats[distract] += centroids[rng.integers(config.n_patterns, size=n_v)[distract]]
        feats[start : start + length] = (
            rng.standard_normal((length, config.feature_dim)) * config.noise + centroids[pattern]
        )
        vid = f"v{i:05d}"
        videos.append(VideoRecord(vid, feats.astype(np.float32)))

        template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
        word = PATTERN_WORDS[pattern]
        tokens = tuple(word if t is None else t for t in template)
        importance = tuple(1 if t is None else 0 for t in template)
        queries.append(QueryRecord(vid, tokens, importance, Proposal(start, start + length)))
    return videos, queries


def query_pattern(query: QueryRecord) -> int:
    """Index of the pattern word a synthetic query names."""
    for tok, imp in zip(query.tokens, query.importance):
        if imp and tok in PATTERN_WORDS:
            return PATTERN_WORDS.index(tok)
    raise ValueError(f"query for {query.video_id!r} names no pattern")


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> tuple[list[int], list[int], list[int]]:
    """Seeded train/val/test split of ``range(n)``."""
    perm = np.random.default_rng([seed, 2]).permutation(n).tolist()
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


# -- file I/O ----------------------------------------------------------------


def write_features(path: str | Path, videos: Sequence[VideoRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, len(videos)))
        for v in videos:
            vid = v.video_id.encode("utf-8")
            feats = np.ascontiguousarray(v.features, dtype="<f4")
            if feats.ndim != 2:
                raise ValueError(f"features of {v.video_id!r} must be 2-D")
            fh.write(struct.pack("<H", len(vid)))
            fh.write(vid)
            fh.write(struct.pack("<II", *feats.shape))
            fh.write(feats.tobytes())


def read_features(path: str | Path, max_frames: int = DEFAULT_MAX_FRAMES) -> list[VideoRecord]:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DatasetError(f"{path}: truncated while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != FEATURE_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    videos = []
    for i in range(count):
        (id_len,) = struct.unpack("<H", take(2, f"video {i} id length"))
        vid = take(id_len, f"video {i} id").decode("utf-8")
        n_v, d = struct.unpack("<II", take(8, f"video {vid!r} shape"))
        if not 1 <= n_v <= max_frames:
            raise DatasetError(f"{path}: video {vid!r} has n_v={n_v}, allowed 1..{max_frames}")
        nbytes = n_v * d * 4
        if pos + nbytes > len(data):
            have = (len(data) - pos) // max(4 * d, 1)
            raise DatasetError(
                f"{path}: video {vid!r} declares {n_v} rows of width {d} but only {have} present"
            )
        feats = np.frombuffer(take(nbytes, f"video {vid!r} data"), dtype="<f4").reshape(n_v, d)
        videos.append(VideoRecord(vid, feats.astype(np.float32)))
    if pos != len(data):
        raise DatasetError(f"{path}: {len(data) - pos} trailing bytes after {count} videos")
    return videos


def write_annotations(path: str | Path, queries: Sequence[QueryRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            gt = None if q._gt is None else [q._gt.start, q._gt.end]
            row = {"video_id": q.video_id, "tokens": list(q.tokens),
                   "importance": list(q.importance), "gt": gt}
            fh.write(json.dumps(row) + "\n")


def read_annotations(path: str | Path, max_words: int = DEFAULT_MAX_WORDS) -> list[QueryRecord]:
    queries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from None
            try:
                vid, tokens = str(row["video_id"]), row["tokens"]
            except (KeyError, TypeError):
                raise DatasetError(f"{where}: missing video_id or tokens") from None
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise DatasetError(f"{where}: tokens of {vid!r} must be a list of strings")
            if not 1 <= len(tokens) <= max_words:
                raise DatasetError(f"{where}: query for {vid!r} has {len(tokens)} tokens, allowed 1..{max_words}")
            importance = row.get("importance")
            if importance is None:
                importance = stopword_importance(tokens)
            if len(importance) != len(tokens) or any(x not in (0, 1) for x in importance):
                raise DatasetError(f"{where}: importance of {vid!r} must be 0/1 flags, one per token")
            gt = row.get("gt")
            if gt is not None:
                if len(gt) != 2 or not all(isinstance(x, int) for x in gt):
                    raise DatasetError(f"{where}: gt of {vid!r} must be [start, end] integers")
                gt = Proposal(*gt)
            queries.append(QueryRecord(vid, tokens, importance, gt))
    return queries


def read_dataset(
    features_path: str | Path,
    annotations_path: str | Path,
    max_frames: int = DEFAULT_MAX_FRAMES,
    max_words: int = DEFAULT_MAX_WORDS,
) -> tuple[list[VideoRecord], list[QueryRecord]]:
    videos = read_features(features_path, max_frames)
    queries = read_annotations(annotations_path, max_words)
    by_id = {v.video_id: v for v in videos}
    if len(by_id) != len(videos):
        raise DatasetError(f"{features_path}: duplicate video ids")
    for i, q in enumerate(queries, 1):
        video = by_id.get(q.video_id)
        if video is None:
            raise DatasetError(f"{annotations_path}: record {i} references unknown video {q.video_id!r}")
        if q.has_gt and not q._gt.is_valid(video.n_frames):
            raise DatasetError(
                f"{annotations_path}: record {i} gt {list(q._gt)} outside video "
                f"{q.video_id!r} of {video.n_frames} frames"
            )
    return videos, queries


def write_dataset(
    features_path: str | Path,
    annotations_path: str | Path,
    videos: Sequence[VideoRecord],
    queries: Sequence[QueryRecord],
) -> None:
    write_features(features_path, videos)
    write_annotations(annotations_path, queries)


def pair_records(videos: Sequence[VideoRecord], queries: Sequence[QueryRecord]) -> list[tuple[VideoRecord, QueryRecord]]:
    by_id = {v.video_id: v for v in videos}
    return [(by_id[q.video_id], q) for q in queries]
