"""Semantic filtering of candidate descriptions.

Candidate captions for a patch are segmented into sentences, the text LLM
sorts cross-candidate sentences into Same / Contradictory / Unique, and
the image-text scorer gates the shaky categories: a contradiction keeps at
most its strictly-better side and only above the score threshold, and a
unique sentence survives only above the threshold. The survivors form the
high-certainty supplement set that steers every later merge prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, TYPE_CHECKING

from .errors import InvalidStateError, LlmFormatError
from .prompts import PromptLibrary

if TYPE_CHECKING:
    from .backends import BackendHub
    from .imaging import RegionPayload

DEFAULT_SCORE_THRESHOLD = 0.3

#: Trailing abbreviations whose period never ends a sentence.
PROTECTED_ABBREVIATIONS = frozenset({"mr", "mrs", "dr", "st", "e.g", "i.e", "etc"})

CLASSIFY_SYSTEM = (
    "You are a meticulous analyst of image descriptions. "
    "You reply with valid JSON and nothing else."
)

_TERMINALS = ".!?"


def segment_sentences(text: str) -> list[str]:
    """Split text into sentences at '.', '!' or '?' followed by whitespace
    or end of text. Periods that close a protected abbreviation (Mr., e.g.,
    etc.) never split. Segments are trimmed; empty segments are dropped.
    """
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] not in _TERMINALS:
            i += 1
            continue
        j = i
        while j + 1 < n and text[j + 1] in _TERMINALS:
            j += 1
        ends_here = j + 1 >= n or text[j + 1].isspace()
        protected = i == j and text[i] == "." and _ends_abbreviation(text, i)
        if ends_here and not protected:
            segment = text[start : j + 1].strip()
            if segment:
                sentences.append(segment)
            start = j + 1
        i = j + 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _ends_abbreviation(text: str, dot_index: int) -> bool:
    k = dot_index
    while k > 0 and (text[k - 1].isalnum() or text[k - 1] == "."):
        k -= 1
    token = text[k:dot_index].lower()
    return token in PROTECTED_ABBREVIATIONS


# -- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class SentenceRef:
    """Position of one sentence inside a candidate set (0-based)."""

    candidate: int
    sentence: int

    def to_list(self) -> list[int]:
        return [self.candidate + 1, self.sentence + 1]


@dataclass(frozen=True)
class CandidateSet:
    """The k candidate descriptions generated for one patch."""

    patch_name: str
    candidates: tuple[str, ...]
    sentences: tuple[tuple[str, ...], ...]

    @classmethod
    def from_texts(cls, patch_name: str, candidates: list[str]) -> "CandidateSet":
        return cls(
            patch_name=patch_name,
            candidates=tuple(candidates),
            sentences=tuple(tuple(segment_sentences(c)) for c in candidates),
        )

    @property
    def k(self) -> int:
        return len(self.candidates)

    def has_ref(self, ref: SentenceRef) -> bool:
        return (
            0 <= ref.candidate < len(self.sentences)
            and 0 <= ref.sentence < len(self.sentences[ref.candidate])
        )

    def to_dict(self) -> dict:
        return {
            "patch": self.patch_name,
            "candidates": list(self.candidates),
            "sentences": [list(s) for s in self.sentences],
        }


@dataclass(frozen=True)
class SameGroup:
    sentence: str
    sources: tuple[SentenceRef, ...]

    def to_dict(self) -> dict:
        return {"sentence": self.sentence, "sources": [r.to_list() for r in self.sources]}


@dataclass(frozen=True)
class ContradictionPair:
    sentence_a: str
    sentence_b: str
    source_a: SentenceRef
    source_b: SentenceRef

    def to_dict(self) -> dict:
        return {
            "a": self.sentence_a,
            "b": self.sentence_b,
            "sources": [self.source_a.to_list(), self.source_b.to_list()],
        }


@dataclass(frozen=True)
class UniqueSentence:
    sentence: str
    source: SentenceRef

    def to_dict(self) -> dict:
        return {"sentence": self.sentence, "source": self.source.to_list()}


@dataclass
class Classification:
    same: list[SameGroup] = field(default_factory=list)
    contradictory: list[ContradictionPair] = field(default_factory=list)
    unique: list[UniqueSentence] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    llm_calls: int = 0

    def to_dict(self) -> dict:
        return {
            "same": [g.to_dict() for g in self.same],
            "contradictory": [p.to_dict() for p in self.contradictory],
            "unique": [u.to_dict() for u in self.unique],
            "warnings": list(self.warnings),
            "llm_calls": self.llm_calls,
        }


class SupplementOrigin(Enum):
    SAME = "same"
    CONTRADICTION_WINNER = "contradiction_winner"
    UNIQUE_KEPT = "unique_kept"


@dataclass(frozen=True)
class SupplementEntry:
    sentence: str
    origin: SupplementOrigin
    fused_score: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "sentence": self.sentence,
            "origin": self.origin.value,
            "fused_score": self.fused_score,
        }


@dataclass(frozen=True)
class SupplementSet:
    """The high-certainty sentences that steer merge prompts (X of Eq-style
    supplement): same-group consolidations first, then contradiction
    winners, then gated uniques, deduplicated on exact text.
    """

    entries: tuple[SupplementEntry, ...]

    def __bool__(self) -> bool:
        return bool(self.entries)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries]}


@dataclass(frozen=True)
class ScoredSentence:
    sentence: str
    fused: float


# -- prompt construction -----------------------------------------------------


def format_candidates_block(cands: CandidateSet, with_indices: bool) -> str:
    """Render candidates for a prompt; classification uses [i.j] sentence
    indices so the LLM can reference sentences unambiguously."""
    lines: list[str] = []
    for ci, sentence_list in enumerate(cands.sentences, start=1):
        lines.append(f"Candidate {ci}:")
        if with_indices:
            for si, sentence in enumerate(sentence_list, start=1):
                lines.append(f"[{ci}.{si}] {sentence}")
        else:
            lines.append(cands.candidates[ci - 1])
    return "\n".join(lines)


def format_supplement_block(supplement: Optional[SupplementSet]) -> str:
    if supplement is None or not supplement.entries:
        return "(no high-confidence sentences)"
    return "\n".join(f"- {entry.sentence}" for entry in supplement.entries)


def build_classify_prompt(library: PromptLibrary, cands: CandidateSet) -> str:
    return library.render(
        "classify",
        candidates=format_candidates_block(cands, with_indices=True),
        examples=library.raw("classify_examples").strip(),
    )


# -- classification ----------------------------------------------------------


def classify(hub: "BackendHub", library: PromptLibrary, cands: CandidateSet) -> Classification:
    """One text-LLM exchange sorting candidate sentences into the three
    categories, with a single repair round-trip on malformed output."""
    if cands.k < 2:
        raise InvalidStateError(f"classification needs k >= 2 candidates, got {cands.k}")
    prompt = build_classify_prompt(library, cands)
    reply = hub.complete(CLASSIFY_SYSTEM, prompt, temperature=0.0)
    calls = 1
    try:
        result = _parse_classification(reply, cands)
    except LlmFormatError as first_error:
        repair_prompt = (
            f"{prompt}\n\nYour previous reply could not be parsed "
            f"({first_error}). Reply again with only the JSON object."
        )
        reply = hub.complete(CLASSIFY_SYSTEM, repair_prompt, temperature=0.0)
        calls += 1
        try:
            result = _parse_classification(reply, cands)
        except LlmFormatError as second_error:
            raise LlmFormatError(
                f"classification reply unparseable after repair: {second_error}"
            ) from second_error
    result.llm_calls = calls
    return result


def _extract_json(text: str) -> dict:
    candidate = text.strip()
    if candidate.startswith("```"):
        candidate = candidate.strip("`")
        if candidate.startswith("json"):
            candidate = candidate[4:]
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        start = candidate.find("{")
        end = candidate.rfind("}")
        if start >= 0 and end > start:
            try:
                return json.loads(candidate[start : end + 1])
            except json.JSONDecodeError:
                pass
    raise LlmFormatError("reply is not valid JSON")


def _coerce_ref(value, cands: CandidateSet) -> Optional[SentenceRef]:
    if (
        isinstance(value, (list, tuple))
        and len(value) == 2
        and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        ref = SentenceRef(candidate=value[0] - 1, sentence=value[1] - 1)
        if cands.has_ref(ref):
            return ref
    return None


def _parse_classification(text: str, cands: CandidateSet) -> Classification:
    doc = _extract_json(text)
    if not isinstance(doc, dict):
        raise LlmFormatError("top-level JSON value is not an object")
    for key in ("same", "contradictory", "unique"):
        if not isinstance(doc.get(key), list):
            raise LlmFormatError(f"missing or non-list {key!r} field")

    result = Classification()
    used: set[SentenceRef] = set()

    def claim(refs: list[SentenceRef]) -> bool:
        if any(r in used for r in refs):
            return False
        used.update(refs)
        return True

    for i, entry in enumerate(doc["same"]):
        sentence = entry.get("sentence") if isinstance(entry, dict) else None
        raw_sources = entry.get("sources") if isinstance(entry, dict) else None
        if not isinstance(sentence, str) or not sentence.strip() or not isinstance(raw_sources, list):
            raise LlmFormatError(f"same[{i}] is malformed")
        refs = []
        for raw in raw_sources:
            ref = _coerce_ref(raw, cands)
            if ref is None:
                result.warnings.append(f"same[{i}]: dropped invalid source {raw!r}")
            elif ref not in refs:
                refs.append(ref)
        if not refs:
            result.warnings.append(f"same[{i}]: dropped, no valid sources")
            continue
        if not claim(refs):
            result.warnings.append(f"same[{i}]: dropped, source already classified")
            continue
        result.same.append(SameGroup(sentence=sentence.strip(), sources=tuple(refs)))

    for i, entry in enumerate(doc["contradictory"]):
        if not isinstance(entry, dict):
            raise LlmFormatError(f"contradictory[{i}] is malformed")
        a, b = entry.get("a"), entry.get("b")
        raw_sources = entry.get("sources")
        if (
            not isinstance(a, str)
            or not a.strip()
            or not isinstance(b, str)
            or not b.strip()
            or not isinstance(raw_sources, list)
            or len(raw_sources) != 2
        ):
            raise LlmFormatError(f"contradictory[{i}] is malformed")
        ref_a = _coerce_ref(raw_sources[0], cands)
        ref_b = _coerce_ref(raw_sources[1], cands)
        if ref_a is None or ref_b is None or ref_a == ref_b:
            result.warnings.append(f"contradictory[{i}]: dropped, invalid sources")
            continue
        if not claim([ref_a, ref_b]):
            result.warnings.append(f"contradictory[{i}]: dropped, source already classified")
            continue
        result.contradictory.append(
            ContradictionPair(
                sentence_a=a.strip(), sentence_b=b.strip(), source_a=ref_a, source_b=ref_b
            )
        )

    for i, entry in enumerate(doc["unique"]):
        sentence = entry.get("sentence") if isinstance(entry, dict) else None
        if not isinstance(sentence, str) or not sentence.strip():
            raise LlmFormatError(f"unique[{i}] is malformed")
        ref = _coerce_ref(entry.get("source"), cands)
        if ref is None:
            result.warnings.append(f"unique[{i}]: dropped, invalid source")
            continue
        if not claim([ref]):
            result.warnings.append(f"unique[{i}]: dropped, source already classified")
            continue
        result.unique.append(UniqueSentence(sentence=sentence.strip(), source=ref))

    return result


# -- score gating ------------------------------------------------------------


def resolve_contradiction(
    hub: "BackendHub",
    region: "RegionPayload",
    pair: ContradictionPair,
    threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> Optional[ScoredSentence]:
    """Score both sides against the region; keep the strictly better one if
    it reaches the threshold. A tie keeps neither (conservative: when the
    scorer cannot separate the claims, both are dropped)."""
    score_a = hub.itm_score(region, pair.sentence_a).fused
    score_b = hub.itm_score(region, pair.sentence_b).fused
    if score_a == score_b:
        return None
    winner, score = (
        (pair.sentence_a, score_a) if score_a > score_b else (pair.sentence_b, score_b)
    )
    if score >= threshold:
        return ScoredSentence(sentence=winner, fused=score)
    return None


def gate_unique(
    hub: "BackendHub",
    region: "RegionPayload",
    sentence: str,
    threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> Optional[ScoredSentence]:
    """Keep a single-source sentence only when its fused score reaches the
    threshold (inclusive)."""
    score = hub.itm_score(region, sentence).fused
    if score >= threshold:
        return ScoredSentence(sentence=sentence, fused=score)
    return None


def build_supplement(
    hub: "BackendHub",
    library: PromptLibrary,
    region: "RegionPayload",
    cands: CandidateSet,
    threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> tuple[Classification, SupplementSet]:
    """Classify the candidates, gate the shaky categories, and assemble the
    supplement set in category order with exact-duplicate removal."""
    classification = classify(hub, library, cands)
    supplement = gate_classification(hub, region, classification, threshold)
    return classification, supplement


def gate_classification(
    hub: "BackendHub",
    region: "RegionPayload",
    classification: Classification,
    threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> SupplementSet:
    """Score-gate an existing classification into a supplement set."""
    entries: list[SupplementEntry] = []
    for group in classification.same:
        entries.append(SupplementEntry(sentence=group.sentence, origin=SupplementOrigin.SAME))
    for pair in classification.contradictory:
        winner = resolve_contradiction(hub, region, pair, threshold)
        if winner is not None:
            entries.append(
                SupplementEntry(
                    sentence=winner.sentence,
                    origin=SupplementOrigin.CONTRADICTION_WINNER,
                    fused_score=winner.fused,
                )
            )
    for unique in classification.unique:
        kept = gate_unique(hub, region, unique.sentence, threshold)
        if kept is not None:
            entries.append(
                SupplementEntry(
                    sentence=kept.sentence,
                    origin=SupplementOrigin.UNIQUE_KEPT,
                    fused_score=kept.fused,
                )
            )

    seen: set[str] = set()
    deduped = []
    for entry in entries:
        if entry.sentence not in seen:
            seen.add(entry.sentence)
            deduped.append(entry)
    return SupplementSet(entries=tuple(deduped))
