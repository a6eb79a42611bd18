"""Deterministic mock transports for tests, replay, and the synthetic bench.

Scripted mocks are pure functions of the request digest: the script maps
digests (or an ordered sequence, or a default) to simple responses, which
are wrapped into the role's wire shape. Failure entries let tests script
transport faults:

    {"$fail": "transport"}                  always raises TransportError
    {"$fail_times": 2, "then": "ok text"}   fails twice, then succeeds
    {"$raw": {...}}                         raw wire body, no wrapping
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any, Callable, Optional, Union

from ..errors import ProtocolError, TransportError
from .base import BackendRequest


def wrap_simple(kind: str, value: Any) -> dict:
    """Wrap a script-file value into the wire shape for a backend kind."""
    if isinstance(value, dict) and "$raw" in value:
        return value["$raw"]
    if kind == "chat":
        if not isinstance(value, str):
            raise ValueError(f"chat script values must be strings, got {type(value).__name__}")
        return chat_response(value)
    if kind == "detector":
        if isinstance(value, list):
            return {"proposals": value}
        if isinstance(value, dict) and "proposals" in value:
            return value
        raise ValueError(f"detector script value must be a proposal list: {value!r}")
    if kind == "itm":
        if isinstance(value, dict) and "sim" in value and "match" in value:
            return value
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return {"sim": value[0], "match": value[1]}
        raise ValueError(f"itm script value must carry sim and match: {value!r}")
    raise ValueError(f"unknown backend kind {kind!r}")


def chat_response(text: str) -> dict:
    return {"choices": [{"message": {"content": text}}]}


def detector_response(proposals: list[dict]) -> dict:
    return {"proposals": proposals}


def itm_response(sim: float, match: float) -> dict:
    return {"sim": sim, "match": match}


class ScriptedTransport:
    """Replays responses keyed by request digest, with sequence fallback."""

    def __init__(
        self,
        kind: str,
        by_digest: Optional[dict[str, Any]] = None,
        sequence: Optional[list[Any]] = None,
        default: Any = None,
        endpoint_id: Optional[str] = None,
        model: str = "mock",
        supports_seed: bool = True,
    ):
        self.kind = kind
        self.by_digest = dict(by_digest or {})
        self.sequence = list(sequence or [])
        self.default = default
        self.endpoint_id = endpoint_id or f"mock:{kind}"
        self.model = model
        self.supports_seed = supports_seed
        self._lock = threading.Lock()
        self._cursor = 0
        self._fail_counts: dict[str, int] = {}

    @classmethod
    def from_file(cls, kind: str, path: Union[str, Path], **kwargs) -> "ScriptedTransport":
        doc = json.loads(Path(path).read_text())
        return cls(
            kind=kind,
            by_digest=doc.get("by_digest"),
            sequence=doc.get("sequence"),
            default=doc.get("default"),
            **kwargs,
        )

    def send(self, request: BackendRequest) -> dict:
        value = self._lookup(request.body_digest)
        if value is None:
            raise ProtocolError(
                f"mock script for {self.endpoint_id} has no response for digest "
                f"{request.body_digest[:12]}..."
            )
        value = self._apply_failures(request.body_digest, value)
        return wrap_simple(self.kind, value)

    def _lookup(self, digest: str) -> Any:
        if digest in self.by_digest:
            return self.by_digest[digest]
        with self._lock:
            if self._cursor < len(self.sequence):
                value = self.sequence[self._cursor]
                self._cursor += 1
                return value
        return self.default

    def _apply_failures(self, digest: str, value: Any) -> Any:
        if not isinstance(value, dict):
            return value
        if value.get("$fail") == "transport":
            raise TransportError(f"scripted transport failure for {self.endpoint_id}")
        if "$fail_times" in value:
            with self._lock:
                done = self._fail_counts.get(digest, 0)
                if done < int(value["$fail_times"]):
                    self._fail_counts[digest] = done + 1
                    raise TransportError(
                        f"scripted transport failure {done + 1}/{value['$fail_times']}"
                    )
            return value.get("then")
        return value


class EchoTransport:
    """Chat transport that replies with the user prompt verbatim."""

    def __init__(self, endpoint_id: str = "mock:echo", model: str = "echo"):
        self.endpoint_id = endpoint_id
        self.model = model
        self.supports_seed = True

    def send(self, request: BackendRequest) -> dict:
        return chat_response(extract_user_text(request.body))


class CallbackTransport:
    """Computes the raw wire body from the request; used by rule-based mocks."""

    def __init__(
        self,
        fn: Callable[[BackendRequest], dict],
        endpoint_id: str,
        model: str = "mock",
        supports_seed: bool = True,
    ):
        self._fn = fn
        self.endpoint_id = endpoint_id
        self.model = model
        self.supports_seed = supports_seed

    def send(self, request: BackendRequest) -> dict:
        return self._fn(request)


class ReplayTransport:
    """Serves responses recorded in a caption record's response map."""

    def __init__(self, responses: dict[str, dict], endpoint_id: str, model: str = "replay"):
        self._responses = responses
        self.endpoint_id = endpoint_id
        self.model = model
        self.supports_seed = True

    def send(self, request: BackendRequest) -> dict:
        raw = self._responses.get(request.body_digest)
        if raw is None:
            raise ProtocolError(
                f"no recorded response for digest {request.body_digest[:12]}... "
                f"on {self.endpoint_id}"
            )
        return raw


def extract_user_text(chat_body: dict) -> str:
    """Pull the text of the last user message out of a chat body."""
    for message in reversed(chat_body.get("messages", [])):
        if message.get("role") != "user":
            continue
        content = message.get("content")
        if isinstance(content, str):
            return content
        if isinstance(content, list):
            return "\n".join(
                part.get("text", "") for part in content if part.get("type") == "text"
            )
    return ""


def extract_system_text(chat_body: dict) -> str:
    for message in chat_body.get("messages", []):
        if message.get("role") == "system" and isinstance(message.get("content"), str):
            return message["content"]
    return ""


def extract_image_payload(chat_body: dict) -> Optional[str]:
    """Pull the base64 image data out of a chat body, if any."""
    for message in chat_body.get("messages", []):
        content = message.get("content")
        if not isinstance(content, list):
            continue
        for part in content:
            if part.get("type") == "image_url":
                url = part.get("image_url", {}).get("url", "")
                if "," in url:
                    return url.split(",", 1)[1]
    return None
