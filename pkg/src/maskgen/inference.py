"""Greedy mask-shift decoding and evaluation."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .embeddings import MASK_ID, STOP_ID, Conditioning, Modality, layout
from .tasks import Sample, TaskSpec, shuffle_images
from .transformer import Parameters, logits_for
from .vocab import Vocabulary


def frozen(params: Parameters) -> Parameters:
    """Untracked view sharing the same arrays; forward passes build no tape."""
    if not any(t.requires_grad for t in params.values()):
        return params
    return Parameters(params.config, {k: nx.Tensor(t.data) for k, t in params.items()})


def default_max_len(cond: Conditioning) -> int:
    return 2 * (len(cond.src) if cond.src is not None else 0) + 8


@dataclass
class DecodeState:
    conditioning: Conditioning
    prefix: list[int] = field(default_factory=list)
    steps: int = 0
    finished: bool = False


def greedy_decode(params: Parameters, cond: Conditioning, max_len: int | None = None) -> list[int]:
    """Fill the mask with the argmax token, shift the mask right, repeat until [STOP].

    Every step recomputes the whole stream; nothing is cached. Ties go to the
    lowest id. [MASK] itself is never emitted. The returned ids exclude [STOP].
    """
    if max_len is None:
        max_len = default_max_len(cond)
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    params = frozen(params)
    # the stream must fit the positional table
    base_len = len(layout(cond, [])[1])
    max_len = min(max_len, params.config.max_positions - base_len + 1)
    state = DecodeState(cond)
    while not state.finished:
        logits = logits_for(cond, state.prefix, params).data.reshape(-1).copy()
        logits[MASK_ID] = -np.inf
        tok = int(np.argmax(logits))
        state.steps += 1
        if tok == STOP_ID:
            state.finished = True
        else:
            state.prefix.append(tok)
            state.finished = state.steps >= max_len
    return state.prefix


def stepwise_nll(params: Parameters, sample: Sample) -> float:
    """Sum over t of -log P(y_t | conditioning, y_<t), one forward pass per t."""
    if not sample.tgt:
        raise ValueError("empty target")
    params = frozen(params)
    cond = sample.conditioning
    total = 0.0
    for t in range(1, len(sample.tgt) + 1):
        logits = logits_for(cond, sample.tgt[: t - 1], params)
        total += nx.cross_entropy(logits, sample.tgt[t - 1]).item()
    return total


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i: i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100], one reference per line, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# evaluation harnesses
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    direction: str
    bleu: float
    exact: float
    count: int
    zero_shot: bool = False
    congruent: float | None = None
    incongruent: float | None = None
    delta: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalReport":
        return cls(**obj)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))

    def summary(self) -> str:
        s = f"{self.direction}: BLEU {self.bleu:.2f} exact {self.exact:.3f} n={self.count}"
        if self.zero_shot:
            s += " [zero-shot]"
        if self.delta is not None:
            s += f" congruent {self.congruent:.2f} incongruent {self.incongruent:.2f} delta {self.delta:.2f}"
        return s


def target_ids(sample: Sample) -> list[int]:
    return list(sample.tgt[:-1])


def decode_samples(params: Parameters, samples: Iterable[Sample], max_len: int | None = None) -> list[list[int]]:
    params = frozen(params)
    return [greedy_decode(params, s.conditioning, max_len) for s in samples]


def score(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> tuple[float, float]:
    if not refs:
        return 0.0, 0.0
    exact = sum(list(h) == list(r) for h, r in zip(hyps, refs)) / len(refs)
    return bleu(hyps, refs), exact


def evaluate_samples(params: Parameters, samples: Sequence[Sample], direction: str = "") -> EvalReport:
    hyps = decode_samples(params, samples)
    b, e = score(hyps, [target_ids(s) for s in samples])
    return EvalReport(direction or (samples[0].task if samples else ""), b, e, len(samples))


def as_text_only(samples: Sequence[Sample]) -> list[Sample]:
    return [Sample(s.task, Modality.TEXT_TO_TEXT, s.spec_id, s.src, None, None, s.tgt) for s in samples]


def congruence_eval(params: Parameters, samples: Sequence[Sample], seed: int,
                    use_images: bool = True, direction: str = "") -> EvalReport:
    """Score decoding with the true images and with deranged images.

    ``use_images=False`` decodes both passes text-only, as a model trained
    without image tasks would; the two passes are then identical.
    """
    if len(samples) < 2:
        raise ValueError("congruence evaluation needs at least two samples")
    if any(s.regions is None for s in samples):
        raise ValueError("congruence evaluation needs image-conditioned samples")
    refs = [target_ids(s) for s in samples]
    shuffled = shuffle_images(samples, seed)
    if not use_images:
        samples, shuffled = as_text_only(samples), as_text_only(shuffled)
    hyp_c = decode_samples(params, samples)
    hyp_i = decode_samples(params, shuffled)
    c_bleu, c_exact = score(hyp_c, refs)
    i_bleu, _ = score(hyp_i, refs)
    return EvalReport(direction or samples[0].task, c_bleu, c_exact, len(samples),
                      congruent=c_bleu, incongruent=i_bleu, delta=c_bleu - i_bleu)


def zero_shot_eval(params: Parameters, direction: tuple[str, str], samples: Sequence[Sample],
                   registry: Sequence[TaskSpec], vocab: Vocabulary) -> EvalReport:
    """Decode a (source language, target specifier) pairing absent from training."""
    src_lang, tgt_lang = direction
    spec = vocab.spec_id(tgt_lang)
    seen = {t.direction for t in registry if t.modality is Modality.TEXT_TO_TEXT}
    if (src_lang, tgt_lang) in seen:
        raise ValueError(f"direction {src_lang}->{tgt_lang} was trained; not zero-shot")
    retargeted = [Sample(s.task, s.modality, spec, s.src, s.regions, s.full_image, s.tgt) for s in samples]
    rep = evaluate_samples(params, retargeted, f"{src_lang}->{tgt_lang}")
    rep.zero_shot = True
    return rep
