"""Word-level vocabulary with reserved special tokens and language specifiers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, MASK, SEP, STOP, IMG = "[PAD]", "[UNK]", "[MASK]", "[SEP]", "[STOP]", "[IMG]"

# Fixed order; ids 0..5. Changing it breaks every saved checkpoint.
RESERVED = (PAD, UNK, MASK, SEP, STOP, IMG)


def specifier(lang: str) -> str:
    return f"[{lang.upper()}]"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    languages: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = {t: i for i, t in enumerate(self.tokens)}
        if len(idx) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("reserved tokens must occupy the lowest ids in canonical order")
        n = len(RESERVED)
        specs = tuple(specifier(l) for l in self.languages)
        if self.tokens[n: n + len(specs)] != specs:
            raise ValueError("language specifiers must follow the reserved block")
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk)

    def token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise IndexError(f"token id {i} out of range (vocabulary size {len(self.tokens)})")
        return self.tokens[i]

    pad = property(lambda self: self.index[PAD])
    unk = property(lambda self: self.index[UNK])
    mask = property(lambda self: self.index[MASK])
    sep = property(lambda self: self.index[SEP])
    stop = property(lambda self: self.index[STOP])
    img = property(lambda self: self.index[IMG])

    def spec_id(self, lang: str) -> int:
        tok = specifier(lang)
        if tok not in self.index:
            raise KeyError(f"no specifier for language {lang!r}")
        return self.index[tok]

    @property
    def special_ids(self) -> frozenset[int]:
        n = len(RESERVED) + len(self.languages)
        return frozenset(range(n))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = tuple(Path(path).read_text(encoding="utf-8").splitlines())
        n = len(RESERVED)
        langs = []
        for t in tokens[n:]:
            if t.startswith("[") and t.endswith("]"):
                langs.append(t[1:-1].lower())
            else:
                break
        return cls(tokens, tuple(langs))


def build_vocab(corpus: Iterable[str], languages: Sequence[str]) -> Vocabulary:
    """Reserved block, then one specifier per language, then word types in
    first-occurrence order (lowercased)."""
    lines = list(corpus)
    if not lines:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    langs = tuple(l.lower() for l in languages)
    tokens = list(RESERVED) + [specifier(l) for l in langs]
    seen = set(tokens)
    for line in lines:
        for w in line.lower().split():
            if w not in seen:
                seen.add(w)
                tokens.append(w)
    return Vocabulary(tuple(tokens), langs)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in text.lower().split()]


_SKIP = frozenset((PAD, MASK, SEP, STOP, IMG))


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    specs = set(vocab.tokens[len(RESERVED): len(RESERVED) + len(vocab.languages)])
    for i in ids:
        tok = vocab.token(int(i))
        if tok in _SKIP or tok in specs:
            continue
        words.append(tok)
    return " ".join(words)
