"""End-to-end orchestration: divide, describe, filter, aggregate.

One image flows through: detect objects, refine the four quadrant patches,
build the semantic patch from the objects that overlap a concise caption,
generate k candidate descriptions per patch plus one global description,
filter and merge within each patch, then stitch patches into the final
caption. Every run yields a CaptionRecord carrying all intermediates, the
backend-call ledger, and the raw responses, so runs can be audited and
replayed offline.

Ablation modes drop individual stages: no semantic patch, plain equal
quadrants, no filtering, single-shot direct fusion, or the bare global
description.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .aggregation import (
    PatchDescription,
    fuse_global,
    inject_semantic,
    intra_merge,
    merge_pair,
    plan_merges,
)
from .backends import BackendHub, BackendRole, CallLedger, ResponseRecorder
from .config import PipelineMode, RunConfig, build_hub, required_roles
from .errors import ConfigError, LlmFormatError, PatchCapError
from .filtering import CandidateSet, build_supplement
from .geometry import (
    ObjectProposal,
    Patch,
    PatchKind,
    QUADRANT_NAMES,
    normalize_label,
    quadrants,
    refine_spatial_patches,
    semantic_patch,
    union_box,
)
from .imaging import RegionPayload, SourceImage, crop_region, load_image
from .prompts import PromptLibrary

SCHEMA_VERSION = 1

OVERLAP_SYSTEM = (
    "You select object labels that match a caption. "
    "Reply with a JSON array and nothing else."
)

_TIMING_KEYS = ("latency_s",)


@dataclass
class CaptionRecord:
    """Full per-image trace: inputs, intermediates, final caption, ledger."""

    image_id: str
    config_digest: str
    mode: str
    status: str = "failed"
    error: Optional[str] = None
    backend_bindings: dict[str, dict] = field(default_factory=dict)
    patches: list[dict] = field(default_factory=list)
    proposals: list[dict] = field(default_factory=list)
    concise_caption: Optional[str] = None
    overlap_labels: list[str] = field(default_factory=list)
    candidate_sets: dict[str, dict] = field(default_factory=dict)
    classifications: dict[str, dict] = field(default_factory=dict)
    supplements: dict[str, dict] = field(default_factory=dict)
    patch_descriptions: dict[str, dict] = field(default_factory=dict)
    merge_plan: Optional[dict] = None
    pair_merges: list[dict] = field(default_factory=list)
    global_description: Optional[str] = None
    injected_global: Optional[str] = None
    final_caption: Optional[str] = None
    ledger: list[dict] = field(default_factory=list)
    responses: dict[str, dict[str, dict]] = field(default_factory=dict)
    wall_time_s: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self, redact_timing: bool = False) -> dict:
        data = {
            "schema_version": self.schema_version,
            "image_id": self.image_id,
            "config_digest": self.config_digest,
            "mode": self.mode,
            "status": self.status,
            "error": self.error,
            "backend_bindings": self.backend_bindings,
            "patches": self.patches,
            "proposals": self.proposals,
            "concise_caption": self.concise_caption,
            "overlap_labels": self.overlap_labels,
            "candidate_sets": self.candidate_sets,
            "classifications": self.classifications,
            "supplements": self.supplements,
            "patch_descriptions": self.patch_descriptions,
            "merge_plan": self.merge_plan,
            "pair_merges": self.pair_merges,
            "global_description": self.global_description,
            "injected_global": self.injected_global,
            "final_caption": self.final_caption,
            "ledger": [dict(e) for e in self.ledger],
            "responses": self.responses,
            "wall_time_s": self.wall_time_s,
        }
        if redact_timing:
            data["wall_time_s"] = 0.0
            for entry in data["ledger"]:
                for key in _TIMING_KEYS:
                    entry[key] = 0.0
        return data

    def to_json(self, redact_timing: bool = False) -> str:
        return json.dumps(self.to_dict(redact_timing=redact_timing), sort_keys=True)


def _patch_dict(patch: Patch) -> dict:
    return {
        "kind": patch.kind.value,
        "name": patch.name,
        "box": list(patch.box.as_tuple()),
        "assigned_objects": list(patch.assigned_objects),
    }


def _proposal_dict(proposal: ObjectProposal) -> dict:
    return {
        "label": proposal.label,
        "box": list(proposal.box.as_tuple()),
        "confidence": proposal.confidence,
    }


def extract_overlap_labels(
    hub: BackendHub,
    library: PromptLibrary,
    concise_caption: str,
    proposal_labels: list[str],
) -> list[str]:
    """Ask the text LLM which detected labels the concise caption mentions.

    The reply is intersected with the (normalized) proposal labels, so the
    LLM can select labels but never invent them. Empty proposals short-
    circuit to an empty result without an LLM call.
    """
    pool = []
    seen = set()
    for label in proposal_labels:
        norm = normalize_label(label)
        if norm and norm not in seen:
            seen.add(norm)
            pool.append(norm)
    if not pool:
        return []
    prompt = library.render(
        "overlap_labels", caption=concise_caption, labels=json.dumps(sorted(pool))
    )
    reply = hub.complete(OVERLAP_SYSTEM, prompt, temperature=0.0)
    try:
        selected = _parse_label_array(reply)
    except LlmFormatError as exc:
        repair = (
            f"{prompt}\n\nYour previous reply could not be parsed ({exc}). "
            f"Reply again with only a JSON array of labels."
        )
        reply = hub.complete(OVERLAP_SYSTEM, repair, temperature=0.0)
        selected = _parse_label_array(reply)
    pool_set = set(pool)
    out = []
    for label in selected:
        norm = normalize_label(label)
        if norm in pool_set and norm not in out:
            out.append(norm)
    return out


def _parse_label_array(text: str) -> list[str]:
    candidate = text.strip()
    if candidate.startswith("```"):
        candidate = candidate.strip("`")
        if candidate.startswith("json"):
            candidate = candidate[4:]
    try:
        doc = json.loads(candidate)
    except json.JSONDecodeError:
        start = candidate.find("[")
        end = candidate.rfind("]")
        if start < 0 or end <= start:
            raise LlmFormatError("reply is not a JSON array") from None
        try:
            doc = json.loads(candidate[start : end + 1])
        except json.JSONDecodeError:
            raise LlmFormatError("reply is not a JSON array") from None
    if not isinstance(doc, list) or not all(isinstance(item, str) for item in doc):
        raise LlmFormatError("reply must be a JSON array of strings")
    return doc


def run_image(
    config: RunConfig,
    img: SourceImage,
    hub: Optional[BackendHub] = None,
    library: Optional[PromptLibrary] = None,
) -> CaptionRecord:
    """Caption one image under the configured mode.

    Backend errors abort the image and return a partial record flagged
    failed; they never raise out of this function.
    """
    base_hub = hub if hub is not None else build_hub(config)
    missing = required_roles(config) - base_hub.bound_roles()
    if missing:
        raise ConfigError(
            f"mode {config.mode.value!r} needs backends for: "
            f"{', '.join(sorted(r.value for r in missing))}"
        )
    if library is None:
        library = PromptLibrary(config.prompt_dir)

    ledger = CallLedger()
    recorder = ResponseRecorder()
    run_hub = base_hub.for_run(ledger=ledger, recorder=recorder)
    record = CaptionRecord(
        image_id=img.image_id, config_digest=config.digest(), mode=config.mode.value
    )
    record.backend_bindings = {
        role.value: {"endpoint_id": t.endpoint_id, "model": t.model}
        for role, t in base_hub.transports.items()
    }
    started = time.perf_counter()
    try:
        _execute(config, img, run_hub, library, record)
        record.status = "ok"
    except PatchCapError as exc:
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
    record.wall_time_s = time.perf_counter() - started
    record.ledger = [entry.to_dict() for entry in ledger.entries()]
    record.responses = recorder.responses
    return record


def _execute(
    config: RunConfig,
    img: SourceImage,
    hub: BackendHub,
    library: PromptLibrary,
    record: CaptionRecord,
) -> None:
    extent = img.extent
    global_patch = Patch(kind=PatchKind.GLOBAL, box=extent.as_box())
    global_region = crop_region(img, global_patch.box)

    # single global description (one call, sampled at the run temperature)
    global_desc = hub.caption(
        BackendRole.CAPTIONER,
        global_region,
        config.caption_prompt,
        temperature=config.temperature,
        seed=config.seed,
    )
    record.global_description = global_desc

    if config.mode is PipelineMode.GLOBAL_ONLY:
        record.patches = [_patch_dict(global_patch)]
        record.final_caption = global_desc
        return

    proposals = hub.detect(img)
    record.proposals = [_proposal_dict(p) for p in proposals]
    kept = [p for p in proposals if p.confidence >= config.conf_threshold]

    if config.mode is PipelineMode.FOUR_EQUAL or not kept:
        spatial = tuple(
            Patch(kind=PatchKind.SPATIAL, box=box, quadrant=name)
            for name, box in zip(QUADRANT_NAMES, quadrants(extent))
        )
    else:
        spatial = refine_spatial_patches(
            extent,
            kept,
            conf_threshold=config.conf_threshold,
            assign_threshold=config.assign_threshold,
            assign_metric=config.assign_metric,
            expand_patches=config.expand_patches,
        )

    semantic: Optional[Patch] = None
    if config.mode is not PipelineMode.NO_SEMANTIC_PATCH and kept:
        concise = hub.caption(
            BackendRole.CONCISE_CAPTIONER,
            global_region,
            config.concise_prompt,
            temperature=0.0,
        )
        record.concise_caption = concise
        labels = extract_overlap_labels(hub, library, concise, [p.label for p in kept])
        record.overlap_labels = labels
        semantic = semantic_patch(extent, kept, labels)

    described_patches: list[Patch] = list(spatial)
    if semantic is not None:
        described_patches.append(semantic)
    record.patches = [_patch_dict(p) for p in described_patches + [global_patch]]

    # k candidate descriptions per patch, seeded seed+i for reproducibility
    regions: dict[str, RegionPayload] = {}
    candidate_sets: dict[str, CandidateSet] = {}
    for patch in described_patches:
        region = crop_region(img, patch.box)
        texts = [
            hub.caption(
                BackendRole.CAPTIONER,
                region,
                config.caption_prompt,
                temperature=config.temperature,
                seed=config.seed + i,
            )
            for i in range(config.k_candidates)
        ]
        regions[patch.name] = region
        candidate_sets[patch.name] = CandidateSet.from_texts(patch.name, texts)
        record.candidate_sets[patch.name] = candidate_sets[patch.name].to_dict()

    if config.mode is PipelineMode.NO_HIERARCHY:
        # direct fusion baseline: every raw candidate plus the global
        # description go into one fusion call
        flat = [
            PatchDescription(
                patch_name=f"{patch.name} candidate {i + 1}",
                text=text,
                supplement=None,
                llm_calls=0,
            )
            for patch in described_patches
            for i, text in enumerate(candidate_sets[patch.name].candidates)
        ]
        record.final_caption = fuse_global(hub, library, flat, global_desc)
        return

    descriptions: dict[str, PatchDescription] = {}
    for patch in described_patches:
        cands = candidate_sets[patch.name]
        supplement = None
        if config.filtering_enabled:
            classification, supplement = build_supplement(
                hub, library, regions[patch.name], cands, config.score_threshold
            )
            record.classifications[patch.name] = classification.to_dict()
            record.supplements[patch.name] = supplement.to_dict()
        desc = intra_merge(hub, library, cands, supplement)
        descriptions[patch.name] = desc
        record.patch_descriptions[patch.name] = desc.to_dict()

    plan = plan_merges(
        described_patches,
        extent,
        iou_threshold=config.iou_threshold,
        semantic_trigger=config.semantic_trigger,
    )
    record.merge_plan = plan.to_dict()

    global_text = global_desc
    if plan.inject_semantic and semantic is not None:
        semantic_desc = descriptions[semantic.name]
        global_text = inject_semantic(
            hub, library, global_text, semantic_desc, semantic_desc.supplement
        )
        record.injected_global = global_text

    spatial_by_name = {p.quadrant: p for p in spatial}
    merged_into: dict[str, PatchDescription] = {}
    for decision in plan.merge_pairs():
        name_a, name_b = decision.pair
        union = union_box([spatial_by_name[name_a].box, spatial_by_name[name_b].box])
        region_union = crop_region(img, union.clip_to(extent))
        result = merge_pair(
            hub,
            library,
            region_union,
            descriptions[name_a],
            descriptions[name_b],
            score_threshold=config.score_threshold,
            apply_filtering=config.filtering_enabled,
        )
        merged_into[name_a] = result.merged
        merged_into[name_b] = result.merged
        record.pair_merges.append(
            {
                "pair": [name_a, name_b],
                "iou": decision.iou,
                "classification": result.classification.to_dict()
                if result.classification
                else None,
                "supplement": result.supplement.to_dict() if result.supplement else None,
                "merged": result.merged.to_dict(),
            }
        )

    fusion_inputs: list[PatchDescription] = []
    emitted: set[int] = set()
    for name in QUADRANT_NAMES:
        if name in merged_into:
            merged = merged_into[name]
            if id(merged) not in emitted:
                emitted.add(id(merged))
                fusion_inputs.append(merged)
        else:
            fusion_inputs.append(descriptions[name])

    record.final_caption = fuse_global(hub, library, fusion_inputs, global_text)


@dataclass
class BatchReport:
    total: int = 0
    succeeded: int = 0
    failed: int = 0
    failed_ids: list[str] = field(default_factory=list)
    live_calls: dict[str, int] = field(default_factory=dict)
    cache_hits: int = 0
    cache_hit_rate: float = 0.0
    latency_percentiles: dict[str, float] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "failed_ids": self.failed_ids,
            "live_calls": self.live_calls,
            "cache_hits": self.cache_hits,
            "cache_hit_rate": self.cache_hit_rate,
            "latency_percentiles": self.latency_percentiles,
            "wall_time_s": self.wall_time_s,
        }


def read_manifest(path: Union[str, Path]) -> list[dict]:
    """Parse a JSONL manifest of {image_id, path} entries."""
    entries = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest line {line_no} is not valid JSON: {exc}") from exc
        if "image_id" not in entry or "path" not in entry:
            raise ConfigError(f"manifest line {line_no} needs image_id and path")
        entries.append(entry)
    return entries


def _percentile(sorted_values: list[float], q: float) -> float:
    if not sorted_values:
        return 0.0
    idx = min(len(sorted_values) - 1, max(0, round(q * (len(sorted_values) - 1))))
    return sorted_values[idx]


def run_batch(
    config: RunConfig,
    manifest: list[dict],
    hub: Optional[BackendHub] = None,
    library: Optional[PromptLibrary] = None,
    workers: Optional[int] = None,
) -> tuple[BatchReport, list[CaptionRecord]]:
    """Caption every manifest image with bounded parallelism.

    Per-image failures (bad file, exhausted backend) become failed records;
    the batch always completes. Records come back in manifest order
    regardless of worker count.
    """
    base_hub = hub if hub is not None else build_hub(config)
    if library is None:
        library = PromptLibrary(config.prompt_dir)
    workers = workers if workers is not None else config.batch_workers

    started = time.perf_counter()

    def one(entry: dict) -> CaptionRecord:
        image_id = str(entry["image_id"])
        try:
            img = load_image(entry["path"], image_id=image_id)
        except PatchCapError as exc:
            return CaptionRecord(
                image_id=image_id,
                config_digest=config.digest(),
                mode=config.mode.value,
                status="failed",
                error=f"{type(exc).__name__}: {exc}",
            )
        return run_image(config, img, hub=base_hub, library=library)

    if workers <= 1:
        records = [one(entry) for entry in manifest]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, manifest))

    report = BatchReport(total=len(records))
    latencies = []
    live_total = 0
    for record in records:
        if record.status == "ok":
            report.succeeded += 1
        else:
            report.failed += 1
            report.failed_ids.append(record.image_id)
        latencies.append(record.wall_time_s)
        for entry in record.ledger:
            if entry["source"] == "live":
                report.live_calls[entry["role"]] = report.live_calls.get(entry["role"], 0) + 1
                live_total += 1
            else:
                report.cache_hits += 1
    resolved = live_total + report.cache_hits
    report.cache_hit_rate = (report.cache_hits / resolved) if resolved else 0.0
    latencies.sort()
    report.latency_percentiles = {
        "p50": _percentile(latencies, 0.50),
        "p90": _percentile(latencies, 0.90),
        "p99": _percentile(latencies, 0.99),
    }
    report.wall_time_s = time.perf_counter() - started
    return report, records


def write_records_jsonl(records: list[CaptionRecord], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.to_json() + "\n")
