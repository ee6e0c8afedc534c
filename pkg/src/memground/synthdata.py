"""Synthetic grounding corpus with a long-tail vocabulary.

Word ids are drawn from a Zipf law, so low-rank words occur thousands of
times while tail words occur a handful of times. Each sample is a clip of
frame features plus a query: frames inside the target interval are noisy
means of the query words' concept vectors, frames outside are noisy means
of distractor concepts disjoint from the query. A sample is rare when any
of its words occurs fewer than `rare_threshold` times in the training
split.

Corpus container layout (little-endian, version 1):
    bytes 0-7   magic b"MGCORP01"
    bytes 8-11  uint32 byte length of the JSON header
    header      UTF-8 JSON {version, config, vocab_sha256, n_samples}
    vocab       W * d_raw float64 concept vectors, row-major
    samples     n_samples records, each:
                    uint32 byte length of the JSON meta
                    meta UTF-8 JSON {id, split, t, n, words, gt, rare}
                    t * d_raw float64 frame features, row-major
All JSON is dumped with sorted keys, so identical corpora serialize to
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

_MAGIC = b"MGCORP01"
SPLITS = ("train", "val", "test")


class CorpusConfigError(ValueError):
    """A corpus configuration field is out of its valid range."""


@dataclass
class CorpusConfig:
    num_train: int = 2000
    num_val: int = 400
    num_test: int = 400
    t_range: tuple = (16, 32)
    n_range: tuple = (3, 6)
    vocab_size: int = 200
    zipf_exponent: float = 1.1
    noise: float = 0.1
    rare_threshold: int = 10
    d_raw: int = 16
    seed: int = 0

    def __post_init__(self):
        self.t_range = tuple(self.t_range)
        self.n_range = tuple(self.n_range)
        if min(self.num_train, self.num_val, self.num_test) < 0 or self.num_train < 1:
            raise CorpusConfigError("corpus needs a nonempty training split")
        for name, (lo, hi) in (("t_range", self.t_range), ("n_range", self.n_range)):
            if lo < 1 or hi < lo:
                raise CorpusConfigError(f"{name} must be a nonempty range, got {(lo, hi)}")
        if self.t_range[0] < 4:
            raise CorpusConfigError("clips shorter than 4 frames cannot hold an interval")
        if self.vocab_size < 2:
            raise CorpusConfigError("vocabulary needs at least 2 words")
        if self.n_range[1] >= self.vocab_size:
            raise CorpusConfigError(
                f"queries of {self.n_range[1]} words leave no distractors "
                f"in a vocabulary of {self.vocab_size}")
        if self.rare_threshold < 1:
            raise CorpusConfigError("rare_threshold must be >= 1")
        if self.noise < 0 or self.zipf_exponent < 0:
            raise CorpusConfigError("noise and zipf_exponent must be nonnegative")


@dataclass
class Vocabulary:
    concepts: np.ndarray                 # W x d_raw, unit-norm rows
    frequency: np.ndarray | None = None  # training-split occurrence counts

    @classmethod
    def build(cls, cfg: CorpusConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        raw = rng.standard_normal((cfg.vocab_size, cfg.d_raw))
        return cls(raw / np.linalg.norm(raw, axis=1, keepdims=True))

    def checksum(self) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(self.concepts, dtype="<f8").tobytes()).hexdigest()


@dataclass
class GroundingSample:
    sample_id: int
    split: str
    frames: np.ndarray  # T x d_raw
    words: list         # N word ids
    gt: tuple           # (tau_s, tau_e), inclusive frame indices
    rare: bool = False


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocabulary
    samples: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [s for s in self.samples if s.split == name]


def zipf_probabilities(vocab_size: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    weights = ranks ** -exponent
    return weights / weights.sum()


def sample_words(cfg: CorpusConfig, rng: np.random.Generator, n_words: int) -> list:
    """n distinct word ids, Zipf-weighted by rank (id == rank - 1)."""
    if n_words > cfg.vocab_size:
        raise CorpusConfigError(f"cannot draw {n_words} distinct words from "
                                f"a vocabulary of {cfg.vocab_size}")
    probs = zipf_probabilities(cfg.vocab_size, cfg.zipf_exponent)
    ids = rng.choice(cfg.vocab_size, size=n_words, replace=False, p=probs)
    return [int(i) for i in ids]


def generate_sample(cfg: CorpusConfig, vocab: Vocabulary,
                    rng: np.random.Generator, sample_id: int = 0,
                    split: str = "train") -> GroundingSample:
    """One clip: inside frames mix the query's concepts, outside frames mix
    per-frame distractor concepts, so the interval is recoverable from the
    concept-word correspondence alone."""
    t_total = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
    n_words = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
    words = sample_words(cfg, rng, n_words)
    span_lo = int(np.ceil(t_total / 8))
    span_hi = int(np.ceil(t_total / 2))
    span = int(rng.integers(span_lo, span_hi + 1))
    tau_s = int(rng.integers(0, t_total - span))
    tau_e = tau_s + span
    target = vocab.concepts[words].mean(axis=0)
    others = np.setdiff1d(np.arange(cfg.vocab_size), np.asarray(words))
    frames = np.empty((t_total, cfg.d_raw))
    for t in range(t_total):
        if tau_s <= t <= tau_e:
            frames[t] = target
        else:
            # distractor mixture must stay distinguishable from the target
            for _ in range(16):
                picks = rng.choice(others, size=min(n_words, others.size), replace=False)
                mix = vocab.concepts[picks].mean(axis=0)
                if np.linalg.norm(mix - target) > 1e-6:
                    break
            frames[t] = mix
    if cfg.noise > 0:
        frames += cfg.noise * rng.standard_normal(frames.shape)
    return GroundingSample(sample_id, split, frames, words, (tau_s, tau_e))


def label_rarity(corpus: Corpus) -> None:
    """Flag samples containing any word with training-split count below the
    threshold; counts come from the training split only but flags cover all
    splits."""
    if not corpus.samples:
        raise ValueError("label_rarity: empty corpus")
    counts = np.zeros(corpus.config.vocab_size, dtype=np.int64)
    for sample in corpus.samples:
        if sample.split == "train":
            for w in sample.words:
                counts[w] += 1
    corpus.vocab.frequency = counts
    threshold = corpus.config.rare_threshold
    for sample in corpus.samples:
        sample.rare = bool(any(counts[w] < threshold for w in sample.words))


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic function of the config; every sample uses a seed derived
    from (config seed, sample id) so generation order is immaterial."""
    vocab = Vocabulary.build(cfg)
    corpus = Corpus(cfg, vocab)
    sizes = (cfg.num_train, cfg.num_val, cfg.num_test)
    sample_id = 0
    for split, count in zip(SPLITS, sizes):
        for _ in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, sample_id]))
            corpus.samples.append(
                generate_sample(cfg, vocab, rng, sample_id, split))
            sample_id += 1
    label_rarity(corpus)
    return corpus


# -- container io -------------------------------------------------------------

def save_corpus(path, corpus: Corpus) -> None:
    header = json.dumps({
        "version": 1,
        "config": asdict(corpus.config),
        "vocab_sha256": corpus.vocab.checksum(),
        "n_samples": len(corpus.samples),
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(corpus.vocab.concepts, dtype="<f8").tobytes())
        for s in corpus.samples:
            meta = json.dumps({
                "id": s.sample_id, "split": s.split, "t": s.frames.shape[0],
                "n": len(s.words), "words": s.words,
                "gt": [int(s.gt[0]), int(s.gt[1])], "rare": s.rare,
            }, sort_keys=True).encode()
            fh.write(struct.pack("<I", len(meta)))
            fh.write(meta)
            fh.write(np.ascontiguousarray(s.frames, dtype="<f8").tobytes())


def load_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a corpus container")
        header = json.loads(fh.read(struct.unpack("<I", fh.read(4))[0]))
        cfg_raw = dict(header["config"])
        cfg = CorpusConfig(**cfg_raw)
        w, d = cfg.vocab_size, cfg.d_raw
        concepts = np.frombuffer(fh.read(w * d * 8), dtype="<f8").reshape(w, d).copy()
        vocab = Vocabulary(concepts)
        if vocab.checksum() != header["vocab_sha256"]:
            raise ValueError(f"{path}: vocabulary checksum mismatch")
        corpus = Corpus(cfg, vocab)
        for _ in range(header["n_samples"]):
            meta = json.loads(fh.read(struct.unpack("<I", fh.read(4))[0]))
            frames = np.frombuffer(fh.read(meta["t"] * d * 8),
                                   dtype="<f8").reshape(meta["t"], d).copy()
            corpus.samples.append(GroundingSample(
                meta["id"], meta["split"], frames, list(meta["words"]),
                tuple(meta["gt"]), meta["rare"]))
    label_rarity(corpus)
    return corpus
