"""Seeded generators for scripted-classification fuzz runs."""

from __future__ import annotations

import hashlib
import json
import random

from patchcap.backends import CallbackTransport, itm_response
from patchcap.filtering import CandidateSet

_ADJECTIVES = (
    "red", "blue", "green", "tall", "small", "wooden", "shiny", "old",
    "striped", "round",
)
_NOUNS = (
    "car", "tree", "bench", "dog", "lamp", "kite", "boat", "sign", "chair",
    "fence", "bottle", "wheel", "ladder", "crate", "awning", "railing",
)


def hash_scorer(seed: int = 0) -> CallbackTransport:
    """Scorer whose (sim, match) is a pure hash of the sentence text."""

    def fn(request):
        sentence = request.body["text"]
        digest = hashlib.sha256(f"{seed}:{sentence}".encode()).hexdigest()
        sim = int(digest[:8], 16) / 0xFFFFFFFF
        match = int(digest[8:16], 16) / 0xFFFFFFFF
        return itm_response(sim, match)

    return CallbackTransport(fn, endpoint_id="mock:hash-scorer")


def _sentence(rng: random.Random, used: set[str]) -> str:
    while True:
        text = f"A {rng.choice(_ADJECTIVES)} {rng.choice(_NOUNS)} is here."
        if text not in used:
            used.add(text)
            return text


def random_classified_case(rng: random.Random) -> tuple[CandidateSet, str]:
    """A random candidate set plus a scripted classification reply over it.

    The reply references real sentences, partitions refs across categories
    without reuse, and occasionally leaves sentences unclassified, the way
    a careful LLM would.
    """
    k = rng.randint(2, 4)
    used: set[str] = set()
    sentence_lists = [
        [_sentence(rng, used) for _ in range(rng.randint(1, 4))] for _ in range(k)
    ]
    texts = [" ".join(sentences) for sentences in sentence_lists]
    cands = CandidateSet.from_texts("TL", texts)

    refs = [
        (ci, si)
        for ci, sentences in enumerate(sentence_lists)
        for si in range(len(sentences))
    ]
    rng.shuffle(refs)

    same, contradictory, unique = [], [], []
    while refs:
        kind = rng.random()
        if kind < 0.35 and len(refs) >= 2:
            size = min(len(refs), rng.randint(2, 3))
            group, refs = refs[:size], refs[size:]
            same.append(
                {
                    "sentence": _sentence(rng, used),
                    "sources": [[c + 1, s + 1] for c, s in group],
                }
            )
        elif kind < 0.7 and len(refs) >= 2:
            (ca, sa), (cb, sb), refs = refs[0], refs[1], refs[2:]
            contradictory.append(
                {
                    "a": cands.sentences[ca][sa],
                    "b": cands.sentences[cb][sb],
                    "sources": [[ca + 1, sa + 1], [cb + 1, sb + 1]],
                }
            )
        elif kind < 0.9:
            (c, s), refs = refs[0], refs[1:]
            unique.append({"sentence": cands.sentences[c][s], "source": [c + 1, s + 1]})
        else:
            refs = refs[1:]  # leave unclassified

    reply = json.dumps({"same": same, "contradictory": contradictory, "unique": unique})
    return cands, reply
