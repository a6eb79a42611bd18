"""Wire-protocol layer: roles, clients, retry policy, ledger, mocks."""

from .base import (
    BackendHub,
    BackendRequest,
    BackendRole,
    CallLedger,
    DEFAULT_CAPTION_PROMPT,
    ItmScore,
    LedgerEntry,
    ROLE_KINDS,
    ResponseRecorder,
    RetryPolicy,
)
from .http import HttpChatTransport, HttpDetectorTransport, HttpScorerTransport
from .mocks import (
    CallbackTransport,
    EchoTransport,
    ReplayTransport,
    ScriptedTransport,
    chat_response,
    detector_response,
    extract_image_payload,
    extract_system_text,
    extract_user_text,
    itm_response,
)

__all__ = [
    "BackendHub",
    "BackendRequest",
    "BackendRole",
    "CallLedger",
    "CallbackTransport",
    "DEFAULT_CAPTION_PROMPT",
    "EchoTransport",
    "HttpChatTransport",
    "HttpDetectorTransport",
    "HttpScorerTransport",
    "ItmScore",
    "LedgerEntry",
    "ROLE_KINDS",
    "ReplayTransport",
    "ResponseRecorder",
    "RetryPolicy",
    "ScriptedTransport",
    "chat_response",
    "detector_response",
    "extract_image_payload",
    "extract_system_text",
    "extract_user_text",
    "itm_response",
]
