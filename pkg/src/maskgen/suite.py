"""Synthetic multilingual lexicons and task-suite generation.

Every language names the same 16 concepts with its own words, so ciphers
between any two languages are concept-aligned. The first eleven concepts
double as image attributes (colour, shape, size).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .embeddings import Modality
from .tasks import (Cipher, Grammar, Record, Sample, Slot, TaskSpec, augmentation_stats,
                    make_samples, read_corpus, synth_captioning_corpus, synth_mmt_corpus,
                    synth_translation_corpus, write_corpus)
from .vocab import Vocabulary, build_vocab

LEXICON: dict[str, tuple[str, ...]] = {
    "en": ("red", "blue", "green", "yellow", "circle", "square", "triangle", "star",
           "small", "big", "huge", "dog", "cat", "man", "sees", "holds"),
    "de": ("rot", "blau", "gruen", "gelb", "kreis", "quadrat", "dreieck", "stern",
           "klein", "gross", "riesig", "hund", "katze", "mann", "sieht", "haelt"),
    "fr": ("rouge", "bleu", "vert", "jaune", "cercle", "carre", "trigone", "etoile",
           "petit", "grand", "enorme", "chien", "chat", "homme", "voit", "tient"),
    "tr": ("kirmizi", "mavi", "yesil", "sari", "daire", "kare", "ucgen", "yildiz",
           "kucuk", "buyuk", "dev", "kopek", "kedi", "adam", "gorur", "tutar"),
}

# placeholder whose translation depends on the image
PLACEHOLDER = {"en": "thing", "de": "ding", "fr": "truc", "tr": "sey"}

# source sentence lengths of the standard suites
DEFAULT_LENGTHS = (3, 6)

SLOT_RANGES = {"color": range(0, 4), "shape": range(4, 8), "size": range(8, 11)}


def lexicon(lang: str, shared: int = 0) -> tuple[str, ...]:
    """Concept words of ``lang``; the last ``shared`` concepts take the English form in every language."""
    if not 0 <= shared <= len(LEXICON["en"]):
        raise ValueError(f"shared must be in [0, {len(LEXICON['en'])}]")
    cut = len(LEXICON["en"]) - shared
    return LEXICON[lang][:cut] + LEXICON["en"][cut:]


def cipher(src: str, tgt: str, reverse: bool = False, shared: int = 0) -> Cipher:
    return Cipher(dict(zip(lexicon(src, shared), lexicon(tgt, shared))), reverse)


def grammar(feature_dim: int = 16, noise: float = 0.1, regions: tuple[int, int] = (2, 4),
            shared: int = 0) -> Grammar:
    words = {lang: lexicon(lang, shared) for lang in LEXICON}
    slots = tuple(Slot(name, {lang: [w[i] for i in idx] for lang, w in words.items()})
                  for name, idx in SLOT_RANGES.items())
    return Grammar(slots, feature_dim, noise, tuple(regions))


@dataclass(frozen=True)
class TaskRecipe:
    """How to synthesise one task's corpus."""

    name: str
    kind: str                       # translation | captioning | mmt
    tgt_lang: str
    src_lang: str | None = None
    size: int = 550
    heldout: int = 50
    lengths: tuple[int, int] = (3, 6)
    reverse: bool = False
    slot: str = "shape"
    reference: bool = False
    train: bool = True              # False: evaluation-only direction

    @property
    def modality(self) -> Modality:
        return {"translation": Modality.TEXT_TO_TEXT, "captioning": Modality.IMAGE_TO_TEXT,
                "mmt": Modality.IMAGE_TEXT_TO_TEXT}[self.kind]

    def task_spec(self, corpus: str | None = None) -> TaskSpec:
        return TaskSpec(self.name, self.modality, self.src_lang, self.tgt_lang, corpus, self.reference)

    @classmethod
    def from_json(cls, obj: Mapping) -> "TaskRecipe":
        obj = dict(obj)
        if "lengths" in obj:
            obj["lengths"] = tuple(obj["lengths"])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown task fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class SuiteSpec:
    tasks: tuple[TaskRecipe, ...]
    languages: tuple[str, ...] = ("en", "de", "fr")
    seed: int = 0
    feature_dim: int = 16
    noise: float = 0.1
    regions: tuple[int, int] = (2, 4)
    shared: int = 0                 # trailing concepts spelled identically in every language

    def __post_init__(self):
        lexicon("en", self.shared)
        if not self.tasks:
            raise ValueError("suite declares no tasks")
        trained = [t for t in self.tasks if t.train]
        if sum(t.reference for t in trained) != 1:
            raise ValueError("exactly one trained task must be the reference task")
        for t in self.tasks:
            for lang in (t.src_lang, t.tgt_lang):
                if lang is not None and lang not in self.languages:
                    raise ValueError(f"task {t.name}: language {lang!r} not declared")
                if lang is not None and lang not in LEXICON:
                    raise ValueError(f"task {t.name}: no lexicon for {lang!r}")
            if t.kind not in ("translation", "captioning", "mmt"):
                raise ValueError(f"task {t.name}: unknown kind {t.kind!r}")
            if not 0 <= t.heldout < t.size:
                raise ValueError(f"task {t.name}: heldout must be in [0, size)")

    @classmethod
    def from_json(cls, obj: Mapping) -> "SuiteSpec":
        obj = dict(obj)
        obj["tasks"] = tuple(TaskRecipe.from_json(t) for t in obj["tasks"])
        for k in ("languages", "regions"):
            if k in obj:
                obj[k] = tuple(obj[k])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown suite fields: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return {"languages": list(self.languages), "seed": self.seed, "feature_dim": self.feature_dim,
                "noise": self.noise, "regions": list(self.regions), "shared": self.shared,
                "tasks": [{**t.__dict__, "lengths": list(t.lengths)} for t in self.tasks]}


def synth_records(recipe: TaskRecipe, suite: SuiteSpec, index: int) -> list[Record]:
    seed = suite.seed * 7919 + index
    g = grammar(suite.feature_dim, suite.noise, suite.regions, suite.shared)
    if recipe.kind == "translation":
        return synth_translation_corpus(cipher(recipe.src_lang, recipe.tgt_lang, recipe.reverse, suite.shared),
                                        recipe.size, recipe.lengths, seed, recipe.name)
    if recipe.kind == "captioning":
        return synth_captioning_corpus(g, recipe.size, seed, recipe.tgt_lang, recipe.name)
    return synth_mmt_corpus(cipher(recipe.src_lang, recipe.tgt_lang, recipe.reverse, suite.shared), g, recipe.slot,
                            PLACEHOLDER[recipe.src_lang], recipe.tgt_lang, recipe.size,
                            recipe.lengths, seed, recipe.name)


@dataclass
class Suite:
    spec: SuiteSpec
    vocab: Vocabulary
    records: dict[str, list[Record]]

    def recipe(self, name: str) -> TaskRecipe:
        return next(t for t in self.spec.tasks if t.name == name)

    @property
    def registry(self) -> tuple[TaskSpec, ...]:
        return tuple(t.task_spec() for t in self.spec.tasks if t.train)

    def split(self, name: str) -> tuple[list[Sample], list[Sample]]:
        r = self.recipe(name)
        samples = make_samples(self.records[name], r.task_spec(), self.vocab)
        cut = len(samples) - r.heldout
        return samples[:cut], samples[cut:]

    def train_samples(self) -> dict[str, list[Sample]]:
        return {t.name: self.split(t.name)[0] for t in self.spec.tasks if t.train}

    def heldout_samples(self, names: Sequence[str] | None = None) -> dict[str, list[Sample]]:
        names = names or [t.name for t in self.spec.tasks]
        return {n: self.split(n)[1] if self.recipe(n).train else
                make_samples(self.records[n], self.recipe(n).task_spec(), self.vocab) for n in names}

    def stats(self) -> list[dict]:
        rows = []
        for t in self.spec.tasks:
            train = self.split(t.name)[0] if t.train else []
            row = augmentation_stats(t.name, train)
            row["type"] = t.kind
            row["direction"] = f"{t.src_lang or 'im'}->{t.tgt_lang}"
            rows.append(row)
        return rows

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t in self.spec.tasks:
            write_corpus(out / f"{t.name}.jsonl", self.records[t.name])
        self.vocab.save(out / "vocab.txt")
        (out / "suite.json").write_text(json.dumps(self.spec.to_json(), indent=1, sort_keys=True) + "\n")
        lines = ["name\ttype\ttask\tsents\taugm\tratio"]
        for row in self.stats():
            lines.append(f"{row['task']}\t{row['type']}\t{row['direction']}\t{row['sents']}\t"
                         f"{row['augm']}\t{row['ratio']:.6f}")
        (out / "stats.tsv").write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, data_dir: str | Path) -> "Suite":
        d = Path(data_dir)
        spec = SuiteSpec.from_json(json.loads((d / "suite.json").read_text()))
        vocab = Vocabulary.load(d / "vocab.txt")
        records = {t.name: read_corpus(d / f"{t.name}.jsonl") for t in spec.tasks}
        return cls(spec, vocab, records)


def vocabulary_for(spec: SuiteSpec, records: Mapping[str, Sequence[Record]]) -> Vocabulary:
    lines = []
    for t in spec.tasks:
        for r in records[t.name]:
            if r.src is not None:
                lines.append(r.src)
            lines.append(r.tgt)
    return build_vocab(lines, spec.languages)


def build_suite(spec: SuiteSpec) -> Suite:
    records = {t.name: synth_records(t, spec, i) for i, t in enumerate(spec.tasks)}
    return Suite(spec, vocabulary_for(spec, records), records)


# ---------------------------------------------------------------------------
# standard suites
# ---------------------------------------------------------------------------

def five_task_spec(seed: int = 0, size: int = 550, heldout: int = 50,
                   lengths: tuple[int, int] = DEFAULT_LENGTHS) -> SuiteSpec:
    """Three ciphers (en->de, de->en, en->fr), English captioning, en->de MMT (reference)."""
    kw = dict(size=size, heldout=heldout, lengths=tuple(lengths))
    return SuiteSpec((
        TaskRecipe("mt_en_de", "translation", "de", "en", **kw),
        TaskRecipe("mt_de_en", "translation", "en", "de", **kw),
        TaskRecipe("mt_en_fr", "translation", "fr", "en", **kw),
        TaskRecipe("ic_en", "captioning", "en", **kw),
        TaskRecipe("mmt_en_de", "mmt", "de", "en", reference=True, **kw),
    ), seed=seed)


def zero_shot_spec(seed: int = 0, size: int = 550, heldout: int = 50,
                   lengths: tuple[int, int] = DEFAULT_LENGTHS, shared: int = 8) -> SuiteSpec:
    """Train en->de, de->en, en->fr; de->fr is evaluation-only.

    Half the concepts share one surface form across languages by default,
    which anchors the three languages to each other.
    """
    kw = dict(size=size, heldout=heldout, lengths=tuple(lengths))
    return SuiteSpec((
        TaskRecipe("mt_en_de", "translation", "de", "en", reference=True, **kw),
        TaskRecipe("mt_de_en", "translation", "en", "de", **kw),
        TaskRecipe("mt_en_fr", "translation", "fr", "en", **kw),
        TaskRecipe("zs_de_fr", "translation", "fr", "de", size=heldout, heldout=0,
                   lengths=tuple(lengths), train=False),
    ), seed=seed, shared=shared)
