"""Seeded synthetic-scene benchmark.

Scenes are JSON blobs of labeled, attributed boxes; the "image" a backend
sees is the serialized scene, so geometry and orchestration run exactly as
they would on pixels while the backends stay rule-based and pure:

- the captioner describes objects intersecting the requested region,
  with configurable detail recall, fabricated-object sentences, and
  attribute contradictions across candidates;
- the detector returns the true boxes;
- the scorer gives grounded sentences ~0.8 and fabricated or mis-attributed
  ones ~0.1, plus clamped Gaussian jitter;
- the text LLM is a rule-based oracle over the shipped prompt templates:
  it classifies sentences by object-name matching and merges by ordered
  concatenation with exact-duplicate removal.

Every backend derives its randomness from the request digest and the
benchmark seed, so the whole benchmark is a pure function of its inputs.
"""

from __future__ import annotations

import base64
import json
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .aggregation import FUSION_SYSTEM, INJECT_SYSTEM, INTRA_SYSTEM, PAIR_SYSTEM
from .backends import (
    BackendHub,
    BackendRequest,
    BackendRole,
    RetryPolicy,
    chat_response,
    extract_image_payload,
    extract_system_text,
    extract_user_text,
    itm_response,
)
from .canonical import canonical_bytes, canonical_json, sha256_hex
from .config import PipelineMode, RunConfig, parse_mode
from .errors import ProtocolError
from .filtering import CLASSIFY_SYSTEM, segment_sentences
from .imaging import SCENE_KEY, SourceImage, load_image, parse_scene_payload
from .metrics import ObjectVocabulary, chair
from .pipeline import OVERLAP_SYSTEM, CaptionRecord, run_image
from .prompts import PromptLibrary

SCENE_NAMES = (
    "car", "dog", "tree", "bench", "bicycle", "lamp", "fountain", "statue",
    "kiosk", "umbrella", "pigeon", "scooter", "mailbox", "hydrant", "planter",
    "cart",
)
PHANTOM_NAMES = (
    "dragon", "unicorn", "submarine", "glacier", "volcano", "tractor",
    "windmill", "lighthouse", "cactus", "igloo", "zeppelin", "gondola",
)
ATTRIBUTES = ("red", "blue", "green", "yellow", "orange", "purple", "black", "white")
PREDICATES = ("left_of", "above", "near")

GROUNDED_SCORE = 0.8
FABRICATED_SCORE = 0.1

_SENTENCE_RE = re.compile(r"^An? (\w+) (\w+) is present\.$")
_INDEXED_LINE_RE = re.compile(r"^\[(\d+)\.(\d+)\] (.+)$", re.MULTILINE)

EMPTY_REGION_TEXT = "An empty region is shown."


def object_sentence(attribute: str, name: str) -> str:
    return f"A {attribute} {name} is present."


def parse_object_sentence(sentence: str) -> Optional[tuple[str, str]]:
    match = _SENTENCE_RE.match(sentence.strip())
    if match is None:
        return None
    return match.group(1), match.group(2)


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: str
    canvas: tuple[int, int]
    objects: tuple[dict, ...]  # {"name", "attribute", "box": [x0,y0,x1,y1]}
    relations: tuple[dict, ...]
    seed: int

    @property
    def true_names(self) -> list[str]:
        return [obj["name"] for obj in self.objects]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "canvas": {"width": self.canvas[0], "height": self.canvas[1]},
            "objects": [dict(o) for o in self.objects],
            "relations": [dict(r) for r in self.relations],
            "seed": self.seed,
        }

    def serialize(self) -> bytes:
        return canonical_bytes({SCENE_KEY: self.to_dict()})

    def to_source(self) -> SourceImage:
        return load_image(self.serialize(), image_id=self.scene_id)


@dataclass(frozen=True)
class ErrorModel:
    """Failure-mode knobs for the synthetic captioner and scorer."""

    detail_recall: float = 1.0
    hallucination_rate: float = 0.0
    contradiction_rate: float = 0.0
    scorer_noise: float = 0.0

    def __post_init__(self):
        for name in ("detail_recall", "hallucination_rate", "contradiction_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.scorer_noise < 0:
            raise ValueError(f"scorer_noise must be >= 0, got {self.scorer_noise}")

    def to_dict(self) -> dict:
        return {
            "detail_recall": self.detail_recall,
            "hallucination_rate": self.hallucination_rate,
            "contradiction_rate": self.contradiction_rate,
            "scorer_noise": self.scorer_noise,
        }


def generate_scene(
    seed: int, n_objects: int = 6, canvas: tuple[int, int] = (640, 480)
) -> SyntheticScene:
    """Deterministic scene layout; the same seed always yields byte-identical
    serialization."""
    if n_objects < 1:
        raise ValueError(f"n_objects must be >= 1, got {n_objects}")
    if n_objects > len(SCENE_NAMES):
        raise ValueError(f"n_objects must be <= {len(SCENE_NAMES)}")
    width, height = canvas
    rng = random.Random(f"scene:{seed}")
    names = rng.sample(SCENE_NAMES, n_objects)
    objects = []
    for name in names:
        bw = rng.randrange(40, max(41, min(200, width // 2)))
        bh = rng.randrange(40, max(41, min(200, height // 2)))
        x0 = rng.randrange(0, width - bw)
        y0 = rng.randrange(0, height - bh)
        objects.append(
            {
                "name": name,
                "attribute": rng.choice(ATTRIBUTES),
                "box": [x0, y0, x0 + bw, y0 + bh],
            }
        )
    relations = []
    for i in range(0, n_objects - 1, 2):
        relations.append(
            {
                "subject": objects[i]["name"],
                "predicate": rng.choice(PREDICATES),
                "object": objects[i + 1]["name"],
            }
        )
    return SyntheticScene(
        scene_id=f"scene-{seed}",
        canvas=canvas,
        objects=tuple(objects),
        relations=tuple(relations),
        seed=seed,
    )


def benchmark_vocabulary() -> ObjectVocabulary:
    """CHAIR vocabulary covering both the true and the phantom name pools."""
    return ObjectVocabulary({name: [] for name in SCENE_NAMES + PHANTOM_NAMES})


def _boxes_intersect(a: Sequence[int], b: Sequence[int]) -> bool:
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def _request_rng(seed: int, request: BackendRequest) -> random.Random:
    return random.Random(f"{seed}:{request.body_digest}")


class SyntheticCaptioner:
    """Describes the objects intersecting the requested region, with error
    injection driven by the request digest."""

    def __init__(self, error_model: ErrorModel, seed: int):
        self.error_model = error_model
        self.seed = seed
        self.endpoint_id = "synthetic:captioner"
        self.model = "synthetic-captioner"
        self.supports_seed = True

    def send(self, request: BackendRequest) -> dict:
        payload = extract_image_payload(request.body)
        if payload is None:
            raise ProtocolError("synthetic captioner needs an image payload")
        scene, box = parse_scene_payload(payload)
        rng = _request_rng(self.seed, request)
        model = self.error_model
        sentences = []
        for obj in scene["objects"]:
            if not _boxes_intersect(obj["box"], box.as_tuple()):
                continue
            if rng.random() >= model.detail_recall:
                continue
            attribute = obj["attribute"]
            if model.contradiction_rate and rng.random() < model.contradiction_rate:
                attribute = rng.choice([a for a in ATTRIBUTES if a != attribute])
            sentences.append(object_sentence(attribute, obj["name"]))
        if model.hallucination_rate and rng.random() < model.hallucination_rate:
            sentences.append(
                object_sentence(rng.choice(ATTRIBUTES), rng.choice(PHANTOM_NAMES))
            )
        return chat_response(" ".join(sentences) if sentences else EMPTY_REGION_TEXT)


class SyntheticConciseCaptioner:
    """Names the two largest objects, standing in for a small, reliable VLM."""

    def __init__(self):
        self.endpoint_id = "synthetic:concise"
        self.model = "synthetic-concise"
        self.supports_seed = True

    def send(self, request: BackendRequest) -> dict:
        payload = extract_image_payload(request.body)
        if payload is None:
            raise ProtocolError("synthetic concise captioner needs an image payload")
        scene, _ = parse_scene_payload(payload)
        ranked = sorted(
            enumerate(scene["objects"]),
            key=lambda pair: (
                -(pair[1]["box"][2] - pair[1]["box"][0])
                * (pair[1]["box"][3] - pair[1]["box"][1]),
                pair[0],
            ),
        )
        names = [obj["name"] for _, obj in ranked[:2]]
        if not names:
            return chat_response("An empty scene.")
        if len(names) == 1:
            return chat_response(f"A scene featuring a {names[0]}.")
        return chat_response(f"A scene featuring a {names[0]} and a {names[1]}.")


class SyntheticDetector:
    """Returns the true object boxes with fixed confidence 0.9."""

    def __init__(self):
        self.endpoint_id = "synthetic:detector"
        self.model = "synthetic-detector"
        self.supports_seed = True

    def send(self, request: BackendRequest) -> dict:
        blob = request.body.get("image_b64")
        if not blob:
            raise ProtocolError("synthetic detector needs image_b64")
        doc = json.loads(base64.b64decode(blob))
        scene = doc[SCENE_KEY] if SCENE_KEY in doc else doc
        return {
            "proposals": [
                {"label": obj["name"], "box": list(obj["box"]), "confidence": 0.9}
                for obj in scene["objects"]
            ]
        }


class SyntheticScorer:
    """Scores a sentence high iff its (attribute, name) matches a true object
    intersecting the scored region."""

    def __init__(self, error_model: ErrorModel, seed: int):
        self.error_model = error_model
        self.seed = seed
        self.endpoint_id = "synthetic:scorer"
        self.model = "synthetic-scorer"
        self.supports_seed = True

    def send(self, request: BackendRequest) -> dict:
        scene, box = parse_scene_payload(request.body["image_b64"])
        sentence = request.body.get("text", "")
        parsed = parse_object_sentence(sentence)
        grounded = False
        if parsed is not None:
            attribute, name = parsed
            for obj in scene["objects"]:
                if (
                    obj["name"] == name
                    and obj["attribute"] == attribute
                    and _boxes_intersect(obj["box"], box.as_tuple())
                ):
                    grounded = True
                    break
        base = GROUNDED_SCORE if grounded else FABRICATED_SCORE
        rng = _request_rng(self.seed, request)
        noise = self.error_model.scorer_noise
        sim = min(1.0, max(0.0, base + rng.gauss(0.0, noise))) if noise else base
        match = min(1.0, max(0.0, base + rng.gauss(0.0, noise))) if noise else base
        return itm_response(sim, match)


class SyntheticTextLlm:
    """Rule-based oracle for every text-LLM exchange of the pipeline.

    Dispatches on the operation's system prompt and parses the structured
    blocks the shipped templates render, so it only understands prompts
    built from the default template set.
    """

    def __init__(self):
        self.endpoint_id = "synthetic:textllm"
        self.model = "synthetic-textllm"
        self.supports_seed = True

    def send(self, request: BackendRequest) -> dict:
        system = extract_system_text(request.body)
        user = extract_user_text(request.body)
        if system == CLASSIFY_SYSTEM:
            return chat_response(self._classify(user))
        if system == OVERLAP_SYSTEM:
            return chat_response(self._overlap(user))
        if system == INTRA_SYSTEM:
            return chat_response(self._intra(user))
        if system == PAIR_SYSTEM:
            return chat_response(self._pair(user))
        if system == INJECT_SYSTEM:
            return chat_response(self._inject(user))
        if system == FUSION_SYSTEM:
            return chat_response(self._fusion(user))
        raise ProtocolError(f"synthetic text LLM got an unknown operation: {system[:60]!r}")

    # -- block parsing (coupled to the shipped prompt templates) -----------

    @staticmethod
    def _section_lines(user: str, header: str) -> list[str]:
        lines = user.splitlines()
        out: list[str] = []
        take = False
        for line in lines:
            if line.strip() == header:
                take = True
                continue
            if take:
                if not line.strip():
                    break
                out.append(line.rstrip())
        return out

    @staticmethod
    def _supplement_sentences(user: str) -> list[str]:
        lines = SyntheticTextLlm._section_lines(user, "High-confidence sentences:")
        return [line[2:].strip() for line in lines if line.startswith("- ")]

    @staticmethod
    def _dedupe(sentences: list[str]) -> list[str]:
        seen: set[str] = set()
        out = []
        for sentence in sentences:
            if sentence and sentence not in seen:
                seen.add(sentence)
                out.append(sentence)
        return out

    def _classify(self, user: str) -> str:
        body = user.split("\nExample.", 1)[0]
        instances: dict[str, list[tuple[int, int, str, str]]] = {}
        order: list[str] = []
        for match in _INDEXED_LINE_RE.finditer(body):
            cand, sent, text = int(match.group(1)), int(match.group(2)), match.group(3)
            parsed = parse_object_sentence(text)
            if parsed is None:
                continue
            attribute, name = parsed
            if name not in instances:
                instances[name] = []
                order.append(name)
            instances[name].append((cand, sent, attribute, text.strip()))
        same, contradictory, unique = [], [], []
        for name in order:
            rows = instances[name]
            attrs = []
            for row in rows:
                if row[2] not in attrs:
                    attrs.append(row[2])
            candidates_involved = {row[0] for row in rows}
            if len(attrs) == 1:
                if len(candidates_involved) >= 2:
                    same.append(
                        {
                            "sentence": rows[0][3],
                            "sources": [[row[0], row[1]] for row in rows],
                        }
                    )
                else:
                    unique.append(
                        {"sentence": rows[0][3], "source": [rows[0][0], rows[0][1]]}
                    )
            else:
                counts = {attr: sum(1 for r in rows if r[2] == attr) for attr in attrs}
                ranked = sorted(attrs, key=lambda a: (-counts[a], attrs.index(a)))
                first = next(r for r in rows if r[2] == ranked[0])
                second = next(r for r in rows if r[2] == ranked[1])
                contradictory.append(
                    {
                        "a": first[3],
                        "b": second[3],
                        "sources": [[first[0], first[1]], [second[0], second[1]]],
                    }
                )
        return json.dumps({"same": same, "contradictory": contradictory, "unique": unique})

    def _overlap(self, user: str) -> str:
        caption_match = re.search(r"^Caption: (.*)$", user, re.MULTILINE)
        labels_match = re.search(r"^Detected labels: (\[.*\])$", user, re.MULTILINE)
        if caption_match is None or labels_match is None:
            raise ProtocolError("overlap prompt missing caption or labels block")
        caption_tokens = set(re.findall(r"[a-z0-9]+", caption_match.group(1).lower()))
        labels = json.loads(labels_match.group(1))
        return json.dumps([label for label in labels if label in caption_tokens])

    def _candidate_sentences(self, user: str) -> list[str]:
        lines = self._section_lines(user, "Candidate descriptions:")
        sentences: list[str] = []
        for line in lines:
            if re.match(r"^Candidate \d+:$", line.strip()):
                continue
            sentences.extend(segment_sentences(line))
        return sentences

    def _intra(self, user: str) -> str:
        supplement = self._supplement_sentences(user)
        chosen = supplement if supplement else self._candidate_sentences(user)
        return " ".join(self._dedupe(chosen)) or EMPTY_REGION_TEXT

    def _pair(self, user: str) -> str:
        supplement = self._supplement_sentences(user)
        if supplement:
            chosen = supplement
        else:
            chosen = []
            for header in ("Description A:", "Description B:"):
                for line in self._section_lines(user, header):
                    chosen.extend(segment_sentences(line))
        return " ".join(self._dedupe(chosen)) or EMPTY_REGION_TEXT

    def _inject(self, user: str) -> str:
        global_sentences: list[str] = []
        for line in self._section_lines(user, "Global description:"):
            global_sentences.extend(segment_sentences(line))
        supplement = self._supplement_sentences(user)
        if supplement:
            extra = supplement
        else:
            extra = []
            for line in self._section_lines(user, "Focused region description:"):
                extra.extend(segment_sentences(line))
        return " ".join(self._dedupe(global_sentences + extra)) or EMPTY_REGION_TEXT

    def _fusion(self, user: str) -> str:
        lines = user.splitlines()
        patch_sentences: list[str] = []
        in_regions = False
        for line in lines:
            stripped = line.strip()
            if stripped == "Region descriptions:":
                in_regions = True
                continue
            if stripped == "Global description:":
                break
            if in_regions and stripped and not re.match(r"^Region .*:$", stripped):
                patch_sentences.extend(segment_sentences(stripped))
        global_sentences: list[str] = []
        for line in self._section_lines(user, "Global description:"):
            global_sentences.extend(segment_sentences(line))

        patch_names = set()
        for sentence in patch_sentences:
            parsed = parse_object_sentence(sentence)
            if parsed is not None:
                patch_names.add(parsed[1])
        kept_global = []
        for sentence in global_sentences:
            parsed = parse_object_sentence(sentence)
            if parsed is not None and parsed[1] in patch_names:
                kept_global.append(sentence)
        return " ".join(self._dedupe(kept_global + patch_sentences)) or EMPTY_REGION_TEXT


def synthetic_transports(error_model: ErrorModel, seed: int) -> dict[BackendRole, object]:
    return {
        BackendRole.CAPTIONER: SyntheticCaptioner(error_model, seed),
        BackendRole.CONCISE_CAPTIONER: SyntheticConciseCaptioner(),
        BackendRole.TEXT_LLM: SyntheticTextLlm(),
        BackendRole.DETECTOR: SyntheticDetector(),
        BackendRole.ITM_SCORER: SyntheticScorer(error_model, seed),
    }


def synthetic_role_transport(role: BackendRole, error_model: ErrorModel, seed: int):
    transport = synthetic_transports(error_model, seed).get(role)
    if transport is None:
        raise ValueError(f"no synthetic backend for role {role.value}")
    return transport


def synthetic_hub(error_model: ErrorModel, seed: int, max_inflight: int = 8) -> BackendHub:
    return BackendHub(
        synthetic_transports(error_model, seed),
        retry=RetryPolicy(max_retries=0, backoff_base=0.0),
        max_inflight=max_inflight,
    )


# -- benchmark driver --------------------------------------------------------


@dataclass
class BenchReport:
    seed: int
    n_scenes: int
    n_objects: int
    error_model: dict
    modes: list[str]
    scenes_digest: str
    per_mode: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_scenes": self.n_scenes,
            "n_objects": self.n_objects,
            "error_model": self.error_model,
            "modes": self.modes,
            "scenes_digest": self.scenes_digest,
            "per_mode": self.per_mode,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def run_bench(
    config: RunConfig,
    n_scenes: int,
    error_model: ErrorModel,
    modes: Sequence[Union[str, PipelineMode]],
    seed: int = 17,
    n_objects: int = 6,
    canvas: tuple[int, int] = (640, 480),
    workers: int = 4,
) -> tuple[BenchReport, dict[str, list[CaptionRecord]]]:
    """Run each mode over the same seeded scenes and compare hallucination
    and recall against scene ground truth. Pure function of its arguments:
    repeated runs produce byte-identical reports.
    """
    mode_list = [parse_mode(m) for m in modes]
    scenes = [generate_scene(seed + i, n_objects=n_objects, canvas=canvas) for i in range(n_scenes)]
    sources = [scene.to_source() for scene in scenes]
    vocab = benchmark_vocabulary()
    transports = synthetic_transports(error_model, seed)
    library = PromptLibrary(config.prompt_dir)

    scenes_digest = sha256_hex(
        canonical_json([scene.to_dict() for scene in scenes]).encode("utf-8")
    )
    report = BenchReport(
        seed=seed,
        n_scenes=n_scenes,
        n_objects=n_objects,
        error_model=error_model.to_dict(),
        modes=[m.value for m in mode_list],
        scenes_digest=scenes_digest,
    )
    records_by_mode: dict[str, list[CaptionRecord]] = {}

    for mode in mode_list:
        mode_config = replace(config, mode=mode, cache_dir=None)
        hub = BackendHub(
            transports,
            retry=RetryPolicy(max_retries=0, backoff_base=0.0),
            max_inflight=config.max_inflight,
        )

        def one(source: SourceImage) -> CaptionRecord:
            return run_image(mode_config, source, hub=hub, library=library)

        if workers <= 1 or n_scenes <= 1:
            records = [one(source) for source in sources]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(one, sources))
        records_by_mode[mode.value] = records

        captions = [record.final_caption or "" for record in records]
        gt = [scene.true_names for scene in scenes]
        if captions:
            chair_result = chair(captions, gt, vocab)
            recalls = []
            for caption, names in zip(captions, gt):
                mentioned = set(vocab.mentioned_objects(caption))
                recalls.append(len(mentioned & set(names)) / len(names))
            recall = sum(recalls) / len(recalls)
            chairs, chairi = chair_result.chairs, chair_result.chairi
        else:
            chairs = chairi = recall = 0.0

        live_calls: dict[str, int] = {}
        for record in records:
            for entry in record.ledger:
                if entry["source"] == "live":
                    live_calls[entry["role"]] = live_calls.get(entry["role"], 0) + 1
        report.per_mode[mode.value] = {
            "chairs": chairs,
            "chairi": chairi,
            "object_recall": recall,
            "failures": sum(1 for r in records if r.status != "ok"),
            "live_calls": dict(sorted(live_calls.items())),
        }

    return report, records_by_mode


def render_bench_table(report: BenchReport) -> str:
    """Human-readable mode comparison."""
    header = f"{'mode':<20} {'CHAIRs':>8} {'CHAIRi':>8} {'recall':>8} {'fails':>6} {'calls':>7}"
    lines = [
        f"synthetic bench: scenes={report.n_scenes} seed={report.seed} "
        f"objects={report.n_objects}",
        f"error model: {json.dumps(report.error_model, sort_keys=True)}",
        header,
        "-" * len(header),
    ]
    for mode in report.modes:
        stats = report.per_mode[mode]
        total_calls = sum(stats["live_calls"].values())
        lines.append(
            f"{mode:<20} {stats['chairs']:>8.4f} {stats['chairi']:>8.4f} "
            f"{stats['object_recall']:>8.4f} {stats['failures']:>6d} {total_calls:>7d}"
        )
    return "\n".join(lines) + "\n"


def export_scenes_jsonl(scenes: Sequence[SyntheticScene], path: Union[str, Path]) -> None:
    """Write scenes as eval-ready JSONL: image_id plus ground-truth objects."""
    with open(path, "w", encoding="utf-8") as handle:
        for scene in scenes:
            handle.write(
                json.dumps(
                    {
                        "image_id": scene.scene_id,
                        "gt_objects": scene.true_names,
                        "scene": scene.to_dict(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
