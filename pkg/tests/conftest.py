from __future__ import annotations

import io
import json

import pytest
from PIL import Image

from patchcap.aggregation import INJECT_SYSTEM
from patchcap.backends import (
    BackendHub,
    BackendRole,
    CallbackTransport,
    RetryPolicy,
    ScriptedTransport,
    chat_response,
    extract_system_text,
)
from patchcap.filtering import CLASSIFY_SYSTEM
from patchcap.pipeline import OVERLAP_SYSTEM
from patchcap.prompts import PromptLibrary


def make_png(width: int, height: int, color=(90, 120, 40)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()


def gradient_png(width: int, height: int, phase: int = 0) -> bytes:
    """PNG whose crops all differ, so request digests never collide."""
    img = Image.new("RGB", (width, height))
    img.putdata(
        [
            ((x * 7 + phase) % 256, (y * 13 + phase) % 256, (x + y + phase) % 256)
            for y in range(height)
            for x in range(width)
        ]
    )
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


EMPTY_CLASSIFICATION = json.dumps({"same": [], "contradictory": [], "unique": []})


def routed_text_llm(
    classify_reply: str = EMPTY_CLASSIFICATION,
    overlap_reply: str = '["cat"]',
    merge_reply: str = "merged text",
):
    """Text-LLM mock answering each pipeline operation with a canned reply."""

    def fn(request):
        system = extract_system_text(request.body)
        if system == CLASSIFY_SYSTEM:
            return chat_response(classify_reply)
        if system == OVERLAP_SYSTEM:
            return chat_response(overlap_reply)
        if system == INJECT_SYSTEM:
            return chat_response(f"injected {merge_reply}")
        return chat_response(merge_reply)

    return CallbackTransport(fn, endpoint_id="mock:routed-textllm")


def make_hub(transports: dict, cache=None, max_retries: int = 3) -> BackendHub:
    return BackendHub(
        transports,
        cache=cache,
        retry=RetryPolicy(max_retries=max_retries, backoff_base=0.0),
    )


def counting_transports(
    detector_proposals: list[dict],
    caption_text: str = "A red car is parked here. A tree stands nearby.",
    concise_text: str = "a car and a cat",
    overlap_reply: str = '["cat"]',
    classify_reply: str = EMPTY_CLASSIFICATION,
) -> dict:
    """Mock bindings for call-accounting pipeline runs on pixel images."""
    return {
        BackendRole.CAPTIONER: ScriptedTransport(
            "chat", default=caption_text, endpoint_id="mock:captioner"
        ),
        BackendRole.CONCISE_CAPTIONER: ScriptedTransport(
            "chat", default=concise_text, endpoint_id="mock:concise"
        ),
        BackendRole.TEXT_LLM: routed_text_llm(
            classify_reply=classify_reply, overlap_reply=overlap_reply
        ),
        BackendRole.DETECTOR: ScriptedTransport(
            "detector", default=detector_proposals, endpoint_id="mock:detector"
        ),
        BackendRole.ITM_SCORER: ScriptedTransport(
            "itm", default={"sim": 0.8, "match": 0.8}, endpoint_id="mock:scorer"
        ),
    }


@pytest.fixture
def prompt_library() -> PromptLibrary:
    return PromptLibrary()


@pytest.fixture
def png_100() -> bytes:
    return make_png(100, 100)
