"""Hierarchical aggregation of patch descriptions.

Stage one merges each patch's candidate descriptions into a single patch
description, steered by that patch's high-certainty supplement. Stage two
stitches patches together: the semantic patch is injected into the global
description when it covers a small part of the image, adjacent spatial
patches whose expanded boxes overlap heavily are merged pairwise (with a
fresh filtering pass over the two descriptions), and one final LLM call
fuses the surviving descriptions with the global description.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, TYPE_CHECKING

from .errors import InvalidStateError, LlmFormatError
from .filtering import (
    CandidateSet,
    Classification,
    SupplementSet,
    build_supplement,
    format_candidates_block,
    format_supplement_block,
)
from .geometry import ADJACENT_PAIRS, ImageExtent, Patch, PatchKind, iou
from .prompts import PromptLibrary

if TYPE_CHECKING:
    from .backends import BackendHub
    from .imaging import RegionPayload

DEFAULT_IOU_THRESHOLD = 0.4

INTRA_SYSTEM = (
    "You are an expert caption editor merging several descriptions of one "
    "image region. Reply with the merged description text only."
)
INJECT_SYSTEM = (
    "You are an expert caption editor enriching a global image description "
    "with details from its primary subject region. Reply with the updated "
    "description text only."
)
PAIR_SYSTEM = (
    "You are an expert caption editor combining descriptions of two "
    "overlapping image regions. Reply with the merged description text only."
)
FUSION_SYSTEM = (
    "You are an expert caption editor composing the final image description "
    "from region descriptions and a draft global description. Reply with the "
    "final description text only."
)


@dataclass(frozen=True)
class PatchDescription:
    """The single description a patch ends up with after intra-patch merging."""

    patch_name: str
    text: str
    supplement: Optional[SupplementSet]
    llm_calls: int = 1

    def __post_init__(self):
        if not self.text:
            raise InvalidStateError(f"patch {self.patch_name!r} produced an empty description")

    def to_dict(self) -> dict:
        return {
            "patch": self.patch_name,
            "text": self.text,
            "supplement": self.supplement.to_dict() if self.supplement else None,
            "llm_calls": self.llm_calls,
        }


@dataclass(frozen=True)
class PairDecision:
    pair: tuple[str, str]
    iou: float
    merge: bool

    def to_dict(self) -> dict:
        return {"pair": list(self.pair), "iou": self.iou, "action": "merge" if self.merge else "keep"}


@dataclass(frozen=True)
class MergePlan:
    """Inter-patch decisions: semantic injection plus the four adjacent pairs."""

    inject_semantic: bool
    semantic_iou: Optional[float]
    pair_merges: tuple[PairDecision, ...]

    def merge_pairs(self) -> list[PairDecision]:
        return [d for d in self.pair_merges if d.merge]

    def to_dict(self) -> dict:
        return {
            "semantic_action": "inject" if self.inject_semantic else "skip",
            "semantic_iou": self.semantic_iou,
            "pairs": [d.to_dict() for d in self.pair_merges],
        }


@dataclass(frozen=True)
class PairMergeResult:
    merged: PatchDescription
    classification: Optional[Classification]
    supplement: Optional[SupplementSet]


def plan_merges(
    patches: Sequence[Patch],
    extent: ImageExtent,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    semantic_trigger: str = "below",
) -> MergePlan:
    """Decide semantic injection and pairwise spatial merges from box overlap.

    The semantic patch is injected when its IoU against the whole image is
    below the threshold (it is focused detail, not a restatement of the
    global view); ``semantic_trigger="above"`` flips the comparison. The
    four adjacent pairs are evaluated in the fixed order TL-TR, BL-BR,
    TL-BL, TR-BR; a quadrant consumed by an earlier merge makes later pairs
    containing it keep.
    """
    if semantic_trigger not in ("below", "above"):
        raise ValueError(f"unknown semantic_trigger: {semantic_trigger!r}")
    spatial = {p.quadrant: p for p in patches if p.kind is PatchKind.SPATIAL}
    if len(spatial) != 4:
        raise InvalidStateError(f"expected exactly 4 spatial patches, got {len(spatial)}")
    semantic = [p for p in patches if p.kind is PatchKind.SEMANTIC]
    if len(semantic) > 1:
        raise InvalidStateError(f"expected at most 1 semantic patch, got {len(semantic)}")

    if semantic:
        semantic_iou = iou(semantic[0].box, extent.as_box())
        if semantic_trigger == "below":
            inject = semantic_iou < iou_threshold
        else:
            inject = semantic_iou > iou_threshold
    else:
        semantic_iou = None
        inject = False

    consumed: set[str] = set()
    decisions = []
    for name_a, name_b in ADJACENT_PAIRS:
        pair_iou = iou(spatial[name_a].box, spatial[name_b].box)
        merge = (
            name_a not in consumed
            and name_b not in consumed
            and pair_iou >= iou_threshold
        )
        if merge:
            consumed.update((name_a, name_b))
        decisions.append(PairDecision(pair=(name_a, name_b), iou=pair_iou, merge=merge))
    return MergePlan(
        inject_semantic=inject, semantic_iou=semantic_iou, pair_merges=tuple(decisions)
    )


def format_descriptions_block(entries: Sequence[tuple[str, str]]) -> str:
    return "\n\n".join(f"Region {name}:\n{text}" for name, text in entries)


def intra_merge(
    hub: "BackendHub",
    library: PromptLibrary,
    cands: CandidateSet,
    supplement: Optional[SupplementSet],
) -> PatchDescription:
    """One LLM call merging a patch's candidates, guided by its supplement."""
    if not cands.candidates:
        raise InvalidStateError("intra_merge needs at least one candidate")
    prompt = library.render(
        "intra_merge",
        candidates=format_candidates_block(cands, with_indices=False),
        supplement=format_supplement_block(supplement),
    )
    text = hub.complete(INTRA_SYSTEM, prompt, temperature=0.0)
    if not text:
        raise LlmFormatError(f"intra merge for patch {cands.patch_name!r} returned empty text")
    return PatchDescription(
        patch_name=cands.patch_name, text=text, supplement=supplement, llm_calls=1
    )


def inject_semantic(
    hub: "BackendHub",
    library: PromptLibrary,
    global_desc: str,
    semantic_desc: PatchDescription,
    supplement: Optional[SupplementSet],
) -> str:
    """One LLM call folding the semantic patch description into the global
    description. Callers skip this call entirely when the plan says skip."""
    if not global_desc:
        raise InvalidStateError("semantic injection needs a global description")
    prompt = library.render(
        "semantic_inject",
        global_description=global_desc,
        semantic_description=semantic_desc.text,
        supplement=format_supplement_block(supplement),
    )
    text = hub.complete(INJECT_SYSTEM, prompt, temperature=0.0)
    if not text:
        raise LlmFormatError("semantic injection returned empty text")
    return text


def merge_pair(
    hub: "BackendHub",
    library: PromptLibrary,
    region_union: "RegionPayload",
    desc_a: PatchDescription,
    desc_b: PatchDescription,
    score_threshold: float = 0.3,
    apply_filtering: bool = True,
) -> PairMergeResult:
    """Merge two overlapping patch descriptions: a filtering pass over the
    pair (scored against the union region) followed by one merge call."""
    classification: Optional[Classification] = None
    supplement: Optional[SupplementSet] = None
    if apply_filtering:
        pair_cands = CandidateSet.from_texts(
            f"{desc_a.patch_name}+{desc_b.patch_name}", [desc_a.text, desc_b.text]
        )
        classification, supplement = build_supplement(
            hub, library, region_union, pair_cands, score_threshold
        )
    prompt = library.render(
        "pair_merge",
        description_a=desc_a.text,
        description_b=desc_b.text,
        supplement=format_supplement_block(supplement),
    )
    text = hub.complete(PAIR_SYSTEM, prompt, temperature=0.0)
    if not text:
        raise LlmFormatError(
            f"pair merge {desc_a.patch_name}+{desc_b.patch_name} returned empty text"
        )
    merged = PatchDescription(
        patch_name=f"{desc_a.patch_name}+{desc_b.patch_name}",
        text=text,
        supplement=supplement,
        llm_calls=1,
    )
    return PairMergeResult(merged=merged, classification=classification, supplement=supplement)


def fuse_global(
    hub: "BackendHub",
    library: PromptLibrary,
    patch_descs: Sequence[PatchDescription],
    global_desc: str,
) -> str:
    """The final LLM call: fold the surviving patch descriptions into the
    global description to produce the finished caption."""
    if not global_desc:
        raise InvalidStateError("global fusion needs a nonempty global description")
    if not patch_descs:
        raise InvalidStateError("global fusion needs at least one patch description")
    prompt = library.render(
        "global_fusion",
        patch_descriptions=format_descriptions_block(
            [(d.patch_name, d.text) for d in patch_descs]
        ),
        global_description=global_desc,
    )
    text = hub.complete(FUSION_SYSTEM, prompt, temperature=0.0)
    if not text:
        raise LlmFormatError("global fusion returned empty text")
    return text
