"""Reference-based caption metrics: BLEU, ROUGE-L, CIDEr-D, CHAIR, lengths.

Tokenization is deliberately simple and documented: lowercase, strip
punctuation characters, split on whitespace. Scores are therefore
comparable run-to-run within this tool; parity with other toolkits'
tokenizers is a non-goal.
"""

from __future__ import annotations

import json
import math
import string
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

from .errors import ConfigError, EmptyInputError
from .filtering import segment_sentences

CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
CIDER_MAX_N = 4

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, drop punctuation characters, split on whitespace."""
    return tuple(text.lower().translate(_PUNCT_TABLE).split())


@dataclass(frozen=True)
class TokenizedCaption:
    original: str
    tokens: tuple[str, ...]

    @classmethod
    def from_text(cls, text: str) -> "TokenizedCaption":
        return cls(original=text, tokens=tokenize(text))


def _ngrams(tokens: Sequence[str], n: int) -> Iterable[tuple[str, ...]]:
    for i in range(len(tokens) - n + 1):
        yield tuple(tokens[i : i + n])


def _all_ngram_counts(tokens: Sequence[str], max_n: int = CIDER_MAX_N) -> Counter:
    counts: Counter = Counter()
    for n in range(1, max_n + 1):
        counts.update(_ngrams(tokens, n))
    return counts


# -- BLEU ---------------------------------------------------------------------


def bleu(candidate: str, references: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU: clipped n-gram precision, geometric mean over orders
    the candidate actually has, brevity penalty against the closest
    reference length (ties resolved toward the shorter reference).

    An empty candidate scores 0.0 by convention.
    """
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    if not references:
        raise EmptyInputError("bleu needs at least one reference")
    cand = tokenize(candidate)
    if not cand:
        return 0.0
    refs = [tokenize(r) for r in references]

    log_sum = 0.0
    orders = 0
    for n in range(1, max_n + 1):
        cand_counts = Counter(_ngrams(cand, n))
        total = sum(cand_counts.values())
        if total == 0:
            continue  # candidate shorter than n tokens: order not applicable
        max_ref_counts: Counter = Counter()
        for ref in refs:
            for gram, count in Counter(_ngrams(ref, n)).items():
                if count > max_ref_counts[gram]:
                    max_ref_counts[gram] = count
        clipped = sum(min(count, max_ref_counts[gram]) for gram, count in cand_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
        orders += 1

    precision = math.exp(log_sum / orders)
    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    if len(cand) > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / len(cand))
    return bp * precision


# -- ROUGE-L ------------------------------------------------------------------


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 between candidate and reference tokens (0.0 when either
    side is empty)."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


# -- CIDEr-D ------------------------------------------------------------------


@dataclass(frozen=True)
class CiderResult:
    per_item: tuple[float, ...]
    mean: float


def cider(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> CiderResult:
    """Corpus CIDEr-D: TF-IDF weighted n-gram (1..4) similarity with
    clipping, Gaussian length penalty (sigma 6), scale factor 10. Document
    frequencies come from the reference corpus, so scores are independent
    of item order.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"candidate/reference corpora differ in size: "
            f"{len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise EmptyInputError("cider needs at least one corpus item")

    ref_counts = [
        [_all_ngram_counts(tokenize(r)) for r in refs] for refs in references
    ]
    cand_counts = [_all_ngram_counts(tokenize(c)) for c in candidates]

    doc_freq: Counter = Counter()
    for refs in ref_counts:
        seen: set = set()
        for counts in refs:
            seen.update(counts.keys())
        doc_freq.update(seen)

    log_n = math.log(len(candidates))
    scores = []
    for cand, refs in zip(cand_counts, ref_counts):
        vec_c, norm_c, len_c = _tfidf_vector(cand, doc_freq, log_n)
        totals = [0.0] * CIDER_MAX_N
        for ref in refs:
            vec_r, norm_r, len_r = _tfidf_vector(ref, doc_freq, log_n)
            delta = float(len_c - len_r)
            penalty = math.exp(-(delta**2) / (2 * CIDER_SIGMA**2))
            for k in range(CIDER_MAX_N):
                val = 0.0
                for gram, weight in vec_c[k].items():
                    val += min(weight, vec_r[k].get(gram, 0.0)) * vec_r[k].get(gram, 0.0)
                if norm_c[k] != 0 and norm_r[k] != 0:
                    val /= norm_c[k] * norm_r[k]
                totals[k] += val * penalty
        score = CIDER_SCALE * sum(totals) / (CIDER_MAX_N * len(refs))
        scores.append(score)

    return CiderResult(per_item=tuple(scores), mean=sum(scores) / len(scores))


def _tfidf_vector(counts: Counter, doc_freq: Counter, log_n: float):
    vec = [defaultdict(float) for _ in range(CIDER_MAX_N)]
    norm = [0.0] * CIDER_MAX_N
    length = 0
    for gram, tf in counts.items():
        df = math.log(max(1.0, doc_freq[gram]))
        k = len(gram) - 1
        weight = tf * (log_n - df)
        vec[k][gram] = weight
        norm[k] += weight * weight
        if k == 1:
            length += tf
    return vec, [math.sqrt(x) for x in norm], length


# -- CHAIR --------------------------------------------------------------------


class ObjectVocabulary:
    """Canonical object names plus synonym aliases for CHAIR matching.

    Aliases are matched greedily, longest token sequence first, so
    multi-word objects ("fire hydrant") win over their suffixes.
    """

    def __init__(self, synonyms: dict[str, Sequence[str]]):
        self.canonical = tuple(synonyms.keys())
        self._alias_map: dict[tuple[str, ...], str] = {}
        by_first: dict[str, list[tuple[tuple[str, ...], str]]] = defaultdict(list)
        for canonical, aliases in synonyms.items():
            for alias in list(aliases) + [canonical]:
                tokens = tokenize(alias)
                if not tokens:
                    continue
                existing = self._alias_map.get(tokens)
                if existing is not None and existing != canonical:
                    raise ConfigError(
                        f"alias {alias!r} maps to both {existing!r} and {canonical!r}"
                    )
                self._alias_map[tokens] = canonical
                by_first[tokens[0]].append((tokens, canonical))
        self._by_first = {
            first: sorted(entries, key=lambda e: -len(e[0]))
            for first, entries in by_first.items()
        }

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ObjectVocabulary":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load vocabulary {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"vocabulary file must be a JSON object: {path}")
        return cls(data)

    def canonicalize(self, name: str) -> str:
        tokens = tokenize(name)
        return self._alias_map.get(tokens, " ".join(tokens))

    def mentioned_objects(self, text: str) -> list[str]:
        """Canonical objects mentioned in the text, ordered by first mention."""
        tokens = tokenize(text)
        found: list[str] = []
        i = 0
        while i < len(tokens):
            entries = self._by_first.get(tokens[i])
            advanced = False
            if entries:
                for alias_tokens, canonical in entries:
                    if tuple(tokens[i : i + len(alias_tokens)]) == alias_tokens:
                        if canonical not in found:
                            found.append(canonical)
                        i += len(alias_tokens)
                        advanced = True
                        break
            if not advanced:
                i += 1
        return found


@dataclass(frozen=True)
class ChairResult:
    chairs: float
    chairi: float
    per_caption: tuple[dict, ...]


def chair(
    captions: Sequence[str],
    gt_objects: Sequence[Iterable[str]],
    vocab: ObjectVocabulary,
) -> ChairResult:
    """Object-hallucination rates.

    CHAIRi = hallucinated mentions / all mentions (0 when nothing is
    mentioned corpus-wide); CHAIRs = fraction of captions with at least one
    hallucinated object.
    """
    if len(captions) != len(gt_objects):
        raise ValueError(
            f"captions/gt_objects differ in size: {len(captions)} vs {len(gt_objects)}"
        )
    per_caption = []
    total_mentioned = 0
    total_hallucinated = 0
    flagged = 0
    for caption, gt in zip(captions, gt_objects):
        mentioned = vocab.mentioned_objects(caption)
        grounded = {vocab.canonicalize(g) for g in gt}
        hallucinated = [m for m in mentioned if m not in grounded]
        total_mentioned += len(mentioned)
        total_hallucinated += len(hallucinated)
        if hallucinated:
            flagged += 1
        per_caption.append(
            {
                "mentioned": mentioned,
                "hallucinated": hallucinated,
                "has_hallucination": bool(hallucinated),
            }
        )
    chairs = flagged / len(captions) if captions else 0.0
    chairi = total_hallucinated / total_mentioned if total_mentioned else 0.0
    return ChairResult(chairs=chairs, chairi=chairi, per_caption=tuple(per_caption))


# -- length statistics --------------------------------------------------------


@dataclass(frozen=True)
class LengthStats:
    mean_chars: float
    mean_words: float
    mean_sentences: float

    def to_dict(self) -> dict:
        return {
            "mean_chars": self.mean_chars,
            "mean_words": self.mean_words,
            "mean_sentences": self.mean_sentences,
        }


def length_stats(captions: Sequence[str]) -> LengthStats:
    if not captions:
        return LengthStats(0.0, 0.0, 0.0)
    n = len(captions)
    return LengthStats(
        mean_chars=sum(len(c) for c in captions) / n,
        mean_words=sum(len(tokenize(c)) for c in captions) / n,
        mean_sentences=sum(len(segment_sentences(c)) for c in captions) / n,
    )
