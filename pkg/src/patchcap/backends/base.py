"""Backend roles, request canonicalization, retry policy, call ledger, hub.

The hub is the single funnel for every remote-model interaction: it
canonicalizes the request body, consults the response cache, applies the
retry policy under a per-role concurrency cap, validates the response
shape, and appends exactly one ledger entry per resolved call.
"""

from __future__ import annotations

import base64
import json
import random
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional, Protocol, TYPE_CHECKING

from ..canonical import canonical_bytes, digest_of
from ..errors import ConfigError, ExhaustedError, ProtocolError, TransportError
from ..geometry import BBox, ImageExtent, ObjectProposal

if TYPE_CHECKING:
    from ..imaging import RegionPayload, SourceImage
    from ..store import ResponseCache


class BackendRole(Enum):
    CAPTIONER = "captioner"
    CONCISE_CAPTIONER = "concise_captioner"
    TEXT_LLM = "text_llm"
    DETECTOR = "detector"
    ITM_SCORER = "itm_scorer"


#: Wire shape spoken by each role ("chat" = OpenAI-style chat completions).
ROLE_KINDS = {
    BackendRole.CAPTIONER: "chat",
    BackendRole.CONCISE_CAPTIONER: "chat",
    BackendRole.TEXT_LLM: "chat",
    BackendRole.DETECTOR: "detector",
    BackendRole.ITM_SCORER: "itm",
}


@dataclass(frozen=True)
class BackendRequest:
    """One canonicalized request; the digest is the cache and mock-script key."""

    role: BackendRole
    endpoint_id: str
    body: dict
    body_digest: str

    @classmethod
    def build(cls, role: BackendRole, endpoint_id: str, body: dict) -> "BackendRequest":
        return cls(role=role, endpoint_id=endpoint_id, body=body, body_digest=digest_of(body))


@dataclass(frozen=True)
class ItmScore:
    """Fused image-text agreement score: mean of similarity and matching score."""

    sim: float
    match: float
    fused: float

    def __post_init__(self):
        expected = (self.sim + self.match) / 2.0
        if self.fused != expected:
            raise ValueError(f"fused must be (sim+match)/2, got {self.fused} != {expected}")

    @classmethod
    def from_parts(cls, sim: float, match: float) -> "ItmScore":
        return cls(sim=sim, match=match, fused=(sim + match) / 2.0)


class Transport(Protocol):
    """Delivers a request to one endpoint and returns the raw JSON body."""

    endpoint_id: str
    model: str
    supports_seed: bool

    def send(self, request: BackendRequest) -> dict: ...


@dataclass
class LedgerEntry:
    role: BackendRole
    endpoint_id: str
    digest: str
    attempts: int
    latency_s: float
    source: str  # "live" | "cache"
    seed_dropped: bool = False
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "role": self.role.value,
            "endpoint_id": self.endpoint_id,
            "digest": self.digest,
            "attempts": self.attempts,
            "latency_s": self.latency_s,
            "source": self.source,
            "seed_dropped": self.seed_dropped,
            "error": self.error,
        }


class CallLedger:
    """Append-only, thread-safe record of every resolved backend call."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def count(self, role: Optional[BackendRole] = None, source: Optional[str] = None) -> int:
        return sum(
            1
            for e in self.entries()
            if (role is None or e.role is role) and (source is None or e.source == source)
        )

    def live_calls(self, role: Optional[BackendRole] = None) -> int:
        return self.count(role=role, source="live")

    def extend_from(self, other: "CallLedger") -> None:
        for entry in other.entries():
            self.append(entry)


@dataclass
class RetryPolicy:
    """Exponential backoff for transport errors only.

    ``attempts <= max_retries + 1``. Setting ``backoff_base`` to 0 disables
    sleeping, which is how tests run. Jitter comes from a seeded generator
    so live runs are reproducible too.
    """

    max_retries: int = 3
    backoff_base: float = 0.25
    backoff_factor: float = 2.0
    jitter: float = 0.1
    seed: int = 0
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        self._rng = random.Random(self.seed)

    def delay(self, attempt: int) -> float:
        if self.backoff_base <= 0:
            return 0.0
        base = self.backoff_base * (self.backoff_factor ** (attempt - 1))
        return base * (1.0 + self.jitter * self._rng.random())

    def pause(self, attempt: int) -> None:
        d = self.delay(attempt)
        if d > 0:
            self.sleep(d)


DEFAULT_CAPTION_PROMPT = "Describe this image in detail"


class ResponseRecorder:
    """Collects every raw response a run consumed, keyed by role and digest.

    A caption record embeds this map so the run can be replayed offline.
    """

    def __init__(self):
        self.responses: dict[str, dict[str, dict]] = {}

    def record(self, role: BackendRole, digest: str, raw: dict) -> None:
        self.responses.setdefault(role.value, {})[digest] = raw


class BackendHub:
    """Role-bound clients sharing one ledger, cache, and retry policy."""

    def __init__(
        self,
        transports: dict[BackendRole, Transport],
        ledger: Optional[CallLedger] = None,
        cache: Optional["ResponseCache"] = None,
        retry: Optional[RetryPolicy] = None,
        max_inflight: int = 8,
        recorder: Optional[ResponseRecorder] = None,
    ):
        self.transports = dict(transports)
        self.ledger = ledger if ledger is not None else CallLedger()
        self.cache = cache
        self.retry = retry if retry is not None else RetryPolicy()
        self.recorder = recorder
        self._semaphores = {
            role: threading.Semaphore(max_inflight) for role in self.transports
        }

    def bound_roles(self) -> set[BackendRole]:
        return set(self.transports)

    def for_run(
        self,
        ledger: Optional[CallLedger] = None,
        recorder: Optional[ResponseRecorder] = None,
    ) -> "BackendHub":
        """Same bindings, cache, and semaphores; fresh per-run observers."""
        hub = BackendHub.__new__(BackendHub)
        hub.transports = self.transports
        hub.ledger = ledger if ledger is not None else CallLedger()
        hub.cache = self.cache
        hub.retry = self.retry
        hub.recorder = recorder
        hub._semaphores = self._semaphores
        return hub

    # -- role clients ------------------------------------------------------

    def caption(
        self,
        role: BackendRole,
        region: "RegionPayload",
        prompt: str,
        temperature: float,
        seed: Optional[int] = None,
    ) -> str:
        if role not in (BackendRole.CAPTIONER, BackendRole.CONCISE_CAPTIONER):
            raise ValueError(f"caption() takes a captioner role, got {role}")
        if not prompt:
            raise ValueError("caption prompt must be nonempty")
        transport = self._transport(role)
        body = _chat_body(
            model=transport.model,
            user_text=prompt,
            temperature=temperature,
            seed=seed,
            image_b64=region.encoded,
        )
        raw = self._request(role, transport, body)
        return _parse_chat(raw)

    def complete(self, system_prompt: str, user_prompt: str, temperature: float = 0.0) -> str:
        role = BackendRole.TEXT_LLM
        transport = self._transport(role)
        body = _chat_body(
            model=transport.model,
            user_text=user_prompt,
            temperature=temperature,
            system_text=system_prompt,
        )
        raw = self._request(role, transport, body)
        return _parse_chat(raw)

    def detect(self, img: "SourceImage") -> list[ObjectProposal]:
        role = BackendRole.DETECTOR
        transport = self._transport(role)
        body = {"image_b64": base64.b64encode(img.data).decode("ascii")}
        raw = self._request(role, transport, body)
        return _parse_proposals(raw, img.extent)

    def itm_score(self, region: "RegionPayload", sentence: str) -> ItmScore:
        if not sentence:
            raise ValueError("itm_score sentence must be nonempty")
        role = BackendRole.ITM_SCORER
        transport = self._transport(role)
        body = {"image_b64": region.encoded, "text": sentence}
        raw = self._request(role, transport, body)
        return _parse_itm(raw)

    # -- core request path -------------------------------------------------

    def _transport(self, role: BackendRole) -> Transport:
        transport = self.transports.get(role)
        if transport is None:
            raise ConfigError(f"no backend bound for role {role.value!r}")
        return transport

    def _request(self, role: BackendRole, transport: Transport, body: dict) -> dict:
        request = BackendRequest.build(role, transport.endpoint_id, body)
        seed_dropped = not transport.supports_seed and "seed" in body

        if self.cache is not None:
            cached = self.cache.get(role.value, transport.endpoint_id, request.body_digest)
            if cached is not None:
                self.ledger.append(
                    LedgerEntry(
                        role=role,
                        endpoint_id=transport.endpoint_id,
                        digest=request.body_digest,
                        attempts=0,
                        latency_s=0.0,
                        source="cache",
                        seed_dropped=seed_dropped,
                    )
                )
                raw = json.loads(cached)
                if self.recorder is not None:
                    self.recorder.record(role, request.body_digest, raw)
                return raw

        start = time.perf_counter()
        attempts = 0
        last_error: Optional[Exception] = None
        semaphore = self._semaphores[role]
        while attempts <= self.retry.max_retries:
            attempts += 1
            try:
                with semaphore:
                    raw = transport.send(request)
            except TransportError as exc:
                last_error = exc
                if attempts <= self.retry.max_retries:
                    self.retry.pause(attempts)
                continue
            except ProtocolError as exc:
                self._ledger_live(role, transport, request, attempts, start, seed_dropped, str(exc))
                raise
            self._ledger_live(role, transport, request, attempts, start, seed_dropped, None)
            if self.cache is not None:
                self.cache.put(
                    role.value, transport.endpoint_id, request.body_digest, canonical_bytes(raw)
                )
            if self.recorder is not None:
                self.recorder.record(role, request.body_digest, raw)
            return raw

        self._ledger_live(
            role, transport, request, attempts, start, seed_dropped, f"exhausted: {last_error}"
        )
        raise ExhaustedError(
            f"{role.value} call failed after {attempts} attempts: {last_error}",
            attempts=attempts,
            last_error=last_error,
        )

    def _ledger_live(self, role, transport, request, attempts, start, seed_dropped, error):
        self.ledger.append(
            LedgerEntry(
                role=role,
                endpoint_id=transport.endpoint_id,
                digest=request.body_digest,
                attempts=attempts,
                latency_s=time.perf_counter() - start,
                source="live",
                seed_dropped=seed_dropped,
                error=error,
            )
        )


# -- body construction and response parsing --------------------------------


def _chat_body(
    model: str,
    user_text: str,
    temperature: float,
    system_text: Optional[str] = None,
    seed: Optional[int] = None,
    image_b64: Optional[str] = None,
) -> dict:
    messages: list[dict[str, Any]] = []
    if system_text is not None:
        messages.append({"role": "system", "content": system_text})
    if image_b64 is not None:
        content: Any = [
            {"type": "text", "text": user_text},
            {
                "type": "image_url",
                "image_url": {"url": f"data:image/png;base64,{image_b64}"},
            },
        ]
    else:
        content = user_text
    messages.append({"role": "user", "content": content})
    body = {"model": model, "messages": messages, "temperature": temperature}
    if seed is not None:
        body["seed"] = seed
    return body


def _parse_chat(raw: dict) -> str:
    try:
        text = raw["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"chat response missing choices[0].message.content: {exc}") from exc
    if not isinstance(text, str):
        raise ProtocolError(f"chat response content is not text: {type(text).__name__}")
    return text


def _parse_proposals(raw: dict, extent: ImageExtent) -> list[ObjectProposal]:
    items = raw.get("proposals")
    if not isinstance(items, list):
        raise ProtocolError("detector response missing 'proposals' list")
    proposals = []
    for item in items:
        try:
            box = BBox(*(int(v) for v in item["box"]))
            proposal = ObjectProposal(
                label=str(item["label"]), box=box, confidence=float(item["confidence"])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed proposal {item!r}: {exc}") from exc
        if not extent.contains(proposal.box):
            raise ProtocolError(
                f"proposal box {proposal.box.as_tuple()} outside image extent "
                f"{extent.width}x{extent.height}"
            )
        proposals.append(proposal)
    return proposals


def _parse_itm(raw: dict) -> ItmScore:
    try:
        sim = float(raw["sim"])
        match = float(raw["match"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"scorer response missing sim/match: {exc}") from exc
    return ItmScore.from_parts(sim, match)
