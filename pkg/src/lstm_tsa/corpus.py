"""Synthetic video corpus, vocabularies and the line-delimited corpus format.

A generated video carries *static* attributes (a subject and maybe an
object) planted as a strong region pattern in every frame, and one
*dynamic* attribute (a verb) planted as weak evidence in a minority of
frames.  A single frame is weak evidence for the verb; the whole video
is strong evidence once regions are pooled with noisy-OR.  Captions are
a fixed template over the planted words, so they are a deterministic
function of the attribute set.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
RESERVED = (BOS, EOS, UNK)
FORMAT_VERSION = 1

SUBJECTS = ["man", "woman", "dog", "cat", "boy", "girl", "horse", "child"]
VERBS = ["running", "jumping", "cooking", "playing", "riding", "swimming", "dancing", "eating"]
OBJECTS = ["ball", "guitar", "bike", "food", "car", "bowl"]
TEMPLATE_WORDS = ("a", "is")


class CorpusFormatError(ValueError):
    pass


@dataclass
class VideoExample:
    id: str
    frame_features: np.ndarray  # (n_frames, frame_dim)
    clip_features: np.ndarray  # (n_frames, clip_dim)
    region_grids: np.ndarray  # (n_frames, grid, grid, region_dim)
    captions: list[list[str]]
    attributes: list[str] = field(default_factory=list)

    @property
    def n_frames(self):
        return self.frame_features.shape[0]

    def frame_regions(self, j):
        """Regions of frame ``j`` as an ``(x*x, h)`` matrix."""
        g = self.region_grids[j]
        return g.reshape(-1, g.shape[-1])

    def all_regions(self):
        g = self.region_grids
        return g.reshape(-1, g.shape[-1])

    def __eq__(self, other):
        if not isinstance(other, VideoExample):
            return NotImplemented
        return (
            self.id == other.id
            and self.captions == other.captions
            and self.attributes == other.attributes
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("frame_features", "clip_features", "region_grids")
            )
        )


@dataclass
class Corpus:
    n_frames: int
    frame_dim: int
    clip_dim: int
    grid_size: int
    region_dim: int
    videos: list[VideoExample]
    meta: dict = field(default_factory=dict)

    def header(self):
        return {
            "type": "header",
            "format_version": FORMAT_VERSION,
            "n_frames": self.n_frames,
            "frame_dim": self.frame_dim,
            "clip_dim": self.clip_dim,
            "grid_size": self.grid_size,
            "region_dim": self.region_dim,
            "n_videos": len(self.videos),
            "meta": self.meta,
        }

    def all_captions(self):
        return [c for v in self.videos for c in v.captions]

    @property
    def dynamic_attributes(self):
        return list(self.meta.get("dynamic", []))

    @property
    def static_attributes(self):
        return list(self.meta.get("static", []))

    def subset(self, start, stop=None):
        return Corpus(self.n_frames, self.frame_dim, self.clip_dim, self.grid_size,
                      self.region_dim, self.videos[start:stop], self.meta)


@dataclass
class CorpusConfig:
    n_videos: int = 20
    n_frames: int = 20
    frame_dim: int = 16
    clip_dim: int = 8
    grid_size: int = 3
    region_dim: int = 12
    n_subjects: int = 4
    n_verbs: int = 5
    n_objects: int = 3
    object_rate: float = 0.5
    dynamic_frames: int = 5
    dynamic_regions: int = 2
    region_noise: float = 0.005
    feature_signal: float = 0.1
    feature_noise: float = 1.0
    planted_gain: float = 8.0
    planted_bias: float = -8.0
    static_prob: float = 0.9997
    dynamic_prob: float = 0.25
    vocab_size: int = 1000
    seed: int = 0

    def validate(self):
        positive = ("n_videos", "n_frames", "frame_dim", "clip_dim", "grid_size", "region_dim",
                    "n_subjects", "n_verbs", "dynamic_frames", "dynamic_regions")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        if self.n_subjects > len(SUBJECTS) or self.n_verbs > len(VERBS) or self.n_objects > len(OBJECTS):
            raise ValueError("attribute counts exceed the built-in word lists")
        n_attr = self.n_subjects + self.n_verbs + self.n_objects
        if self.vocab_size < len(RESERVED) + n_attr + len(TEMPLATE_WORDS):
            raise ValueError(
                f"vocab_size {self.vocab_size} cannot hold {len(RESERVED)} reserved tokens, "
                f"{n_attr} attributes and {len(TEMPLATE_WORDS)} template words"
            )
        if n_attr > self.region_dim:
            raise ValueError(f"region_dim {self.region_dim} < {n_attr} attributes; patterns must be orthogonal")
        if self.dynamic_frames > self.n_frames:
            raise ValueError("dynamic_frames exceeds n_frames")
        per_frame = 2 + self.dynamic_regions
        if per_frame > self.grid_size**2:
            raise ValueError(f"grid {self.grid_size}x{self.grid_size} too small for {per_frame} planted regions")


def _logit(p):
    return math.log(p / (1 - p))


def caption_for(subject, verb, obj=None):
    words = ["a", subject, "is", verb]
    if obj is not None:
        words += ["a", obj]
    return words


def generate_synthetic_corpus(config: CorpusConfig) -> Corpus:
    config.validate()
    rng = np.random.default_rng(config.seed)
    subjects = SUBJECTS[: config.n_subjects]
    verbs = VERBS[: config.n_verbs]
    objects = OBJECTS[: config.n_objects]
    static = subjects + objects
    words = subjects + verbs + objects
    h, n_cells = config.region_dim, config.grid_size**2

    q, _ = np.linalg.qr(rng.standard_normal((h, h)))
    patterns = {w: q[:, k].copy() for k, w in enumerate(words)}
    # region amplitudes that hit the target probabilities under the planted detector
    amp = {}
    for w in words:
        target = config.dynamic_prob if w in verbs else config.static_prob
        amp[w] = (_logit(target) - config.planted_bias) / config.planted_gain
    frame_proj = rng.standard_normal((len(static), config.frame_dim))
    clip_proj = rng.standard_normal((len(verbs), config.clip_dim))

    videos = []
    for vid in range(config.n_videos):
        subject = subjects[rng.integers(len(subjects))]
        verb = verbs[rng.integers(len(verbs))]
        obj = None
        if objects and rng.random() < config.object_rate:
            obj = objects[rng.integers(len(objects))]
        present_static = [subject] + ([obj] if obj else [])
        evidence = set(rng.choice(config.n_frames, size=config.dynamic_frames, replace=False).tolist())

        regions = config.region_noise * rng.standard_normal((config.n_frames, n_cells, h))
        for j in range(config.n_frames):
            n_planted = len(present_static) + (config.dynamic_regions if j in evidence else 0)
            cells = rng.choice(n_cells, size=n_planted, replace=False)
            planted = present_static + ([verb] * config.dynamic_regions if j in evidence else [])
            for cell, w in zip(cells, planted):
                regions[j, cell] += amp[w] * patterns[w]

        static_ind = np.array([1.0 if w in present_static else 0.0 for w in static])
        dyn_ind = np.array([1.0 if w == verb else 0.0 for w in verbs])
        frames = config.feature_noise * rng.standard_normal((config.n_frames, config.frame_dim))
        frames += config.feature_signal * (static_ind @ frame_proj)
        clips = config.feature_noise * rng.standard_normal((config.n_frames, config.clip_dim))
        for j in evidence:
            clips[j] += config.feature_signal * (dyn_ind @ clip_proj)

        videos.append(VideoExample(
            id=f"video{vid:04d}",
            frame_features=frames,
            clip_features=clips,
            region_grids=regions.reshape(config.n_frames, config.grid_size, config.grid_size, h),
            captions=[caption_for(subject, verb, obj)],
            attributes=sorted(present_static + [verb]),
        ))

    meta = {
        "generator": asdict(config),
        "static": static,
        "dynamic": verbs,
        "patterns": {w: patterns[w].tolist() for w in words},
        "planted_gain": config.planted_gain,
        "planted_bias": config.planted_bias,
    }
    return Corpus(config.n_frames, config.frame_dim, config.clip_dim, config.grid_size, h, videos, meta)


def planted_detector(corpus: Corpus, attributes):
    """The ground-truth linear detector ``(W, b)`` the generator planted."""
    gain, bias = corpus.meta["planted_gain"], corpus.meta["planted_bias"]
    W = np.array([gain * np.asarray(corpus.meta["patterns"][a]) for a in attributes])
    return W, np.full(len(attributes), float(bias))


# -- vocabularies ---------------------------------------------------------


class Vocabulary:
    """Token list with ``<bos>``, ``<eos>``, ``<unk>`` fixed at ids 0, 1, 2."""

    def __init__(self, words):
        self.tokens = list(RESERVED) + [w for w in words if w not in RESERVED]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    bos, eos, unk = 0, 1, 2

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words, add_eos=True):
        ids = [self.index.get(w, self.unk) for w in words]
        return ids + [self.eos] if add_eos else ids

    def decode(self, ids):
        out = []
        for i in ids:
            if i == self.eos:
                break
            out.append(self.tokens[i])
        return out


def build_vocabulary(captions, K) -> Vocabulary:
    if K < 1:
        raise ValueError("K must be >= 1")
    captions = list(captions)
    if not captions:
        raise ValueError("cannot build a vocabulary from no captions")
    counts = Counter(w for c in captions for w in c if w not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([w for w, _ in ranked[:K]])


def select_attributes(videos, K=None):
    """Most frequent caption words by video count, skipping words in every video.

    A word present in every video has no negative bag, so it cannot be
    learned as an attribute.
    """
    videos = list(videos)
    df = Counter(w for v in videos for w in {t for c in v.captions for t in c})
    ranked = sorted(((w, n) for w, n in df.items() if n < len(videos) and w not in RESERVED),
                    key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked]
    return words if K is None else words[:K]


def attribute_labels(video: VideoExample, attributes):
    present = {t for c in video.captions for t in c}
    return np.array([1.0 if a in present else 0.0 for a in attributes])


def encode_one_hot(token_id, vocab_size):
    if isinstance(vocab_size, Vocabulary):
        vocab_size = len(vocab_size)
    if not 0 <= token_id < vocab_size:
        raise IndexError(f"token id {token_id} out of range for vocabulary of {vocab_size}")
    v = np.zeros(vocab_size)
    v[token_id] = 1.0
    return v


# -- serialization --------------------------------------------------------


def save_corpus(corpus: Corpus, path):
    path = Path(path)
    lines = [json.dumps(corpus.header(), sort_keys=True)]
    for v in corpus.videos:
        lines.append(json.dumps({
            "type": "video",
            "id": v.id,
            "frame_features": v.frame_features.tolist(),
            "clip_features": v.clip_features.tolist(),
            "region_grids": v.region_grids.tolist(),
            "captions": v.captions,
            "attributes": v.attributes,
        }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def _field(record, name, lineno):
    if name not in record:
        raise CorpusFormatError(f"line {lineno}: missing field {name!r}")
    return record[name]


def _array(record, name, lineno, shape):
    try:
        arr = np.asarray(_field(record, name, lineno), dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CorpusFormatError(f"line {lineno}: field {name!r} is not a numeric array ({exc})") from None
    if arr.shape != shape:
        raise CorpusFormatError(f"line {lineno}: field {name!r} has shape {arr.shape}, header declares {shape}")
    if not np.all(np.isfinite(arr)):
        raise CorpusFormatError(f"line {lineno}: field {name!r} contains non-finite values")
    return arr


def load_corpus(path) -> Corpus:
    path = Path(path)
    header = None
    videos = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: malformed record ({exc.msg})") from None
            if not isinstance(record, dict):
                raise CorpusFormatError(f"line {lineno}: record is not an object")
            kind = _field(record, "type", lineno)
            if kind == "header":
                if header is not None:
                    raise CorpusFormatError(f"line {lineno}: duplicate header")
                header = record
                for name in ("n_frames", "frame_dim", "clip_dim", "grid_size", "region_dim"):
                    val = _field(record, name, lineno)
                    if not isinstance(val, int) or val < 1:
                        raise CorpusFormatError(f"line {lineno}: field {name!r} must be a positive integer")
                continue
            if header is None:
                raise CorpusFormatError(f"line {lineno}: record before header")
            if kind != "video":
                raise CorpusFormatError(f"line {lineno}: unknown record type {kind!r}")
            n, x = header["n_frames"], header["grid_size"]
            frames = _field(record, "frame_features", lineno)
            if isinstance(frames, list) and len(frames) != n:
                raise CorpusFormatError(
                    f"line {lineno}: field 'frame_features' has {len(frames)} frames, header declares N_v={n}"
                )
            captions = _field(record, "captions", lineno)
            if (not isinstance(captions, list) or not captions
                    or not all(isinstance(c, list) and c and all(isinstance(t, str) for t in c) for c in captions)):
                raise CorpusFormatError(f"line {lineno}: field 'captions' must be a non-empty list of token lists")
            videos.append(VideoExample(
                id=str(_field(record, "id", lineno)),
                frame_features=_array(record, "frame_features", lineno, (n, header["frame_dim"])),
                clip_features=_array(record, "clip_features", lineno, (n, header["clip_dim"])),
                region_grids=_array(record, "region_grids", lineno, (n, x, x, header["region_dim"])),
                captions=captions,
                attributes=list(record.get("attributes", [])),
            ))
    if header is None:
        raise CorpusFormatError(f"{path}: no header record")
    return Corpus(header["n_frames"], header["frame_dim"], header["clip_dim"], header["grid_size"],
                  header["region_dim"], videos, header.get("meta", {}))


def save_predictions(predictions, path):
    """``predictions``: iterable of ``(video_id, tokens)``."""
    with Path(path).open("w") as fh:
        for vid, tokens in predictions:
            fh.write(json.dumps({"id": vid, "caption": list(tokens)}) + "\n")


def load_predictions(path):
    out = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                out[str(record["id"])] = list(record["caption"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"line {lineno}: malformed prediction ({exc})") from None
    return out
