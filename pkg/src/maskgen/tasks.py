"""Task declarations, synthetic corpora, sequence unrolling and scheduling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embeddings import STOP_ID, Conditioning, Modality, RegionFeature, full_image_region
from .vocab import Vocabulary, encode


@dataclass(frozen=True)
class TaskSpec:
    name: str
    modality: Modality
    src_lang: str | None
    tgt_lang: str
    corpus: str | None = None      # path of a corpus file, when file-backed
    reference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.modality.has_source != (self.src_lang is not None):
            raise ValueError(f"task {self.name}: source language must be given iff the task has a source")

    @property
    def direction(self) -> tuple[str | None, str]:
        return (self.src_lang, self.tgt_lang)

    def to_json(self) -> dict:
        return {"name": self.name, "modality": self.modality.value, "src_lang": self.src_lang,
                "tgt_lang": self.tgt_lang, "corpus": self.corpus, "reference": self.reference}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TaskSpec":
        return cls(obj["name"], Modality(obj["modality"]), obj.get("src_lang"), obj["tgt_lang"],
                   obj.get("corpus"), bool(obj.get("reference", False)))


def check_registry(tasks: Sequence[TaskSpec], vocab: Vocabulary | None = None) -> None:
    if not tasks:
        raise ValueError("no tasks registered")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError("duplicate task names")
    if sum(t.reference for t in tasks) != 1:
        raise ValueError("exactly one task must carry the reference flag")
    if vocab is not None:
        for t in tasks:
            vocab.spec_id(t.tgt_lang)


@dataclass(frozen=True, eq=False)
class Record:
    """One corpus line before tokenisation."""

    task: str
    src: str | None
    tgt: str
    regions: tuple[RegionFeature, ...] | None = None   # full image included, bbox = whole image
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {"task": self.task, "src": self.src, "tgt": self.tgt,
               "regions": None if self.regions is None else [r.to_json() for r in self.regions]}
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Record":
        obj = json.loads(line)
        regions = obj.get("regions")
        if regions is not None:
            regions = tuple(RegionFeature.from_json(r) for r in regions)
        return cls(obj["task"], obj.get("src"), obj["tgt"], regions)


def write_corpus(path: str | Path, records: Iterable[Record]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_corpus(path: str | Path) -> list[Record]:
    with open(path, encoding="utf-8") as fh:
        return [Record.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True, eq=False)
class Sample:
    task: str
    modality: Modality
    spec_id: int
    src: tuple[int, ...] | None
    regions: tuple[RegionFeature, ...] | None
    full_image: RegionFeature | None
    tgt: tuple[int, ...]

    def __post_init__(self):
        if not self.tgt or self.tgt[-1] != STOP_ID:
            raise ValueError("target must be non-empty and end with [STOP]")
        # raises on modality mismatch
        self.conditioning

    @property
    def conditioning(self) -> Conditioning:
        return Conditioning(self.modality, self.spec_id, self.src, self.regions, self.full_image)


def split_full_image(regions: Sequence[RegionFeature]) -> tuple[tuple[RegionFeature, ...], RegionFeature | None]:
    full = None
    rois = []
    for r in regions:
        if full is None and r.is_full_image:
            full = r
        else:
            rois.append(r)
    return tuple(rois), full


def make_sample(record: Record, task: TaskSpec, vocab: Vocabulary) -> Sample:
    src = None
    if task.modality.has_source:
        if record.src is None:
            raise ValueError(f"task {task.name} needs a source sentence")
        src = tuple(encode(record.src, vocab))
    elif record.src is not None:
        raise ValueError(f"task {task.name} takes no source sentence")
    regions = full = None
    if task.modality.has_image:
        if not record.regions:
            raise ValueError(f"task {task.name} needs regions")
        regions, full = split_full_image(record.regions)
        if full is None:
            raise ValueError(f"task {task.name}: record has no full-image region")
    elif record.regions is not None:
        raise ValueError(f"task {task.name} takes no regions")
    tgt = tuple(encode(record.tgt, vocab)) + (STOP_ID,)
    return Sample(task.name, task.modality, vocab.spec_id(task.tgt_lang), src, regions, full, tgt)


def make_samples(records: Iterable[Record], task: TaskSpec, vocab: Vocabulary) -> list[Sample]:
    return [make_sample(r, task, vocab) for r in records]


# ---------------------------------------------------------------------------
# unrolling
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UnrolledExample:
    task: str
    sample: Sample
    t: int          # 1-based step
    gold: int

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.sample.tgt[: self.t - 1]


def unroll(sample: Sample) -> list[UnrolledExample]:
    """One masked-prediction example per target token, [STOP] included."""
    if not sample.tgt:
        raise ValueError("cannot unroll an empty target")
    return [UnrolledExample(sample.task, sample, t, sample.tgt[t - 1])
            for t in range(1, len(sample.tgt) + 1)]


def unroll_corpus(samples: Iterable[Sample]) -> list[UnrolledExample]:
    out: list[UnrolledExample] = []
    for s in samples:
        out.extend(unroll(s))
    return out


def augmentation_stats(name: str, samples: Sequence[Sample]) -> dict:
    """Sentence count, unrolled count and their ratio (= mean target length)."""
    sents = len(samples)
    augm = sum(len(s.tgt) for s in samples)
    return {"task": name, "sents": sents, "augm": augm, "ratio": augm / sents if sents else 0.0}


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cipher:
    """Word-for-word map from a source to a target lexicon, optionally reversing order."""

    mapping: Mapping[str, str]
    reverse: bool = False

    def __post_init__(self):
        if not self.mapping:
            raise ValueError("empty cipher")
        if len(set(self.mapping.values())) != len(self.mapping):
            raise ValueError("cipher is not bijective")
        object.__setattr__(self, "mapping", dict(self.mapping))

    @property
    def source_words(self) -> list[str]:
        return list(self.mapping)

    def apply(self, words: Sequence[str]) -> list[str]:
        out = [self.mapping[w] for w in words]
        return out[::-1] if self.reverse else out


def synth_translation_corpus(cipher: Cipher, size: int, lengths: tuple[int, int], seed: int,
                             task: str = "mt") -> list[Record]:
    """Uniformly random source sentences and their cipher images."""
    if size <= 0:
        raise ValueError("corpus size must be positive")
    lo, hi = lengths
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length range {lengths}")
    rng = np.random.default_rng(seed)
    lex = cipher.source_words
    out = []
    for _ in range(size):
        n = int(rng.integers(lo, hi + 1))
        words = [lex[i] for i in rng.integers(0, len(lex), size=n)]
        out.append(Record(task, " ".join(words), " ".join(cipher.apply(words))))
    return out


@dataclass(frozen=True)
class Slot:
    """One attribute (e.g. colour) with its values' surface words per language."""

    name: str
    words: Mapping[str, Sequence[str]]   # language -> one word per value

    @property
    def n_values(self) -> int:
        return len(next(iter(self.words.values())))


@dataclass(frozen=True)
class Grammar:
    slots: tuple[Slot, ...]
    feature_dim: int
    noise: float = 0.0
    regions: tuple[int, int] = (2, 4)
    image_size: tuple[float, float] = (64.0, 48.0)

    def __post_init__(self):
        width = sum(s.n_values for s in self.slots)
        if width > self.feature_dim:
            raise ValueError(f"slot widths ({width}) exceed feature dimension {self.feature_dim}")

    def offsets(self) -> list[int]:
        out, acc = [], 0
        for s in self.slots:
            out.append(acc)
            acc += s.n_values
        return out

    def render(self, attrs: Sequence[int], lang: str) -> str:
        return " ".join(s.words[lang][a] for s, a in zip(self.slots, attrs))


def _random_box(rng: np.random.Generator, w: float, h: float) -> tuple[float, float, float, float]:
    x1, x2 = sorted(rng.uniform(0, w, size=2))
    y1, y2 = sorted(rng.uniform(0, h, size=2))
    if x2 - x1 < 1.0:
        x1, x2 = max(0.0, x1 - 1.0), min(w, x2 + 1.0)
    if y2 - y1 < 1.0:
        y1, y2 = max(0.0, y1 - 1.0), min(h, y2 + 1.0)
    return (round(x1, 3), round(y1, 3), round(x2, 3), round(y2, 3))


def synth_image(grammar: Grammar, attrs: Sequence[int], rng: np.random.Generator
                ) -> tuple[RegionFeature, ...]:
    """Regions whose slot sub-ranges one-hot encode ``attrs``; full image last."""
    w, h = grammar.image_size
    base = np.zeros(grammar.feature_dim)
    for off, a in zip(grammar.offsets(), attrs):
        base[off + a] = 1.0
    k = int(rng.integers(grammar.regions[0], grammar.regions[1] + 1))
    regions = []
    for _ in range(k):
        feat = base + grammar.noise * rng.standard_normal(grammar.feature_dim)
        conf = round(float(rng.uniform(0.3, 1.0)), 4)
        regions.append(RegionFeature(np.round(feat, 6), _random_box(rng, w, h), w, h, conf))
    whole = base + grammar.noise * rng.standard_normal(grammar.feature_dim)
    regions.append(full_image_region(np.round(whole, 6), w, h))
    return tuple(regions)


def synth_captioning_corpus(grammar: Grammar, size: int, seed: int, lang: str,
                            task: str = "ic") -> list[Record]:
    """Images built from sampled attributes; captions render those attributes."""
    if size <= 0:
        raise ValueError("corpus size must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        attrs = [int(rng.integers(0, s.n_values)) for s in grammar.slots]
        regions = synth_image(grammar, attrs, rng)
        out.append(Record(task, None, grammar.render(attrs, lang), regions, {"attrs": attrs}))
    return out


def synth_mmt_corpus(cipher: Cipher, grammar: Grammar, slot: str, placeholder: str,
                     tgt_lang: str, size: int, lengths: tuple[int, int], seed: int,
                     task: str = "mmt") -> list[Record]:
    """Cipher translation where one source word is an ambiguous placeholder.

    The placeholder's translation is the target-language word for the image's
    value of ``slot``, so the image is needed to translate it.
    """
    if size <= 0:
        raise ValueError("corpus size must be positive")
    if placeholder in cipher.mapping:
        raise ValueError("placeholder must not be a cipher word")
    names = [s.name for s in grammar.slots]
    si = names.index(slot)
    rng = np.random.default_rng(seed)
    lex = cipher.source_words
    lo, hi = lengths
    out = []
    for _ in range(size):
        attrs = [int(rng.integers(0, s.n_values)) for s in grammar.slots]
        regions = synth_image(grammar, attrs, rng)
        n = int(rng.integers(lo, hi + 1))
        words = [lex[i] for i in rng.integers(0, len(lex), size=n)]
        words[int(rng.integers(0, n))] = placeholder
        mapping = dict(cipher.mapping)
        mapping[placeholder] = grammar.slots[si].words[tgt_lang][attrs[si]]
        tgt = [mapping[w] for w in words]
        if cipher.reverse:
            tgt = tgt[::-1]
        out.append(Record(task, " ".join(words), " ".join(tgt), regions, {"attrs": attrs}))
    return out


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------

class _Pool:
    def __init__(self, examples: list[UnrolledExample], seed: int):
        if not examples:
            raise ValueError("task has no training examples")
        self.examples = examples
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(examples))
        self.cursor = 0
        self.passes = 0

    def next(self) -> UnrolledExample:
        ex = self.examples[self.order[self.cursor]]
        self.cursor += 1
        if self.cursor == len(self.examples):
            self.passes += 1
            self.cursor = 0
            self.order = self.rng.permutation(len(self.examples))
        return ex


class Scheduler:
    """Yields one unrolled example per registered task per step.

    Each task walks its own shuffled pool and reshuffles when exhausted. The
    epoch counter tracks completed passes over the reference task's pool.
    """

    def __init__(self, tasks: Sequence[TaskSpec], samples: Mapping[str, Sequence[Sample]], seed: int):
        check_registry(tasks)
        self.tasks = list(tasks)
        self.pools = {}
        for i, t in enumerate(self.tasks):
            self.pools[t.name] = _Pool(unroll_corpus(samples[t.name]), seed * 1009 + i)
        self.reference = next(t.name for t in self.tasks if t.reference)
        self.step = 0

    @property
    def epoch(self) -> int:
        return self.pools[self.reference].passes

    def pool_size(self, task: str) -> int:
        return len(self.pools[task].examples)

    def next(self) -> list[UnrolledExample]:
        self.step += 1
        return [self.pools[t.name].next() for t in self.tasks]


def scheduler_next(state: Scheduler) -> list[UnrolledExample]:
    return state.next()


# ---------------------------------------------------------------------------
# adversarial image shuffling
# ---------------------------------------------------------------------------

def derangement(n: int, seed: int) -> np.ndarray:
    """Seeded permutation of range(n) without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least two items")
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def shuffle_images(samples: Sequence[Sample], seed: int) -> list[Sample]:
    """Re-pair every sample with another sample's image; text untouched."""
    perm = derangement(len(samples), seed)
    out = []
    for s, j in zip(samples, perm):
        donor = samples[int(j)]
        if donor.regions is None or s.regions is None:
            raise ValueError("shuffle_images needs image-conditioned samples")
        out.append(Sample(s.task, s.modality, s.spec_id, s.src, donor.regions, donor.full_image, s.tgt))
    return out
