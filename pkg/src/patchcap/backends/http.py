"""Live HTTP transports.

Captioner and text-LLM roles speak the OpenAI-compatible chat-completions
shape; the detector and ITM scorer use the minimal JSON contracts below:

    POST {base_url}/detect  {"image_b64": ...}
        -> {"proposals": [{"label": ..., "box": [x0,y0,x1,y1], "confidence": ...}]}
    POST {base_url}/itm     {"image_b64": ..., "text": ...}
        -> {"sim": ..., "match": ...}

Connection failures, timeouts, and 5xx responses raise TransportError
(retryable); 4xx and unparseable bodies raise ProtocolError.
"""

from __future__ import annotations

import json
from typing import Optional

import httpx

from ..errors import ProtocolError, TransportError
from .base import BackendRequest


class _HttpTransportBase:
    def __init__(
        self,
        base_url: str,
        path: str,
        endpoint_id: str,
        model: str = "",
        api_key: Optional[str] = None,
        supports_seed: bool = True,
        timeout: float = 60.0,
        client: Optional[httpx.Client] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.path = path
        self.endpoint_id = endpoint_id
        self.model = model
        self.api_key = api_key
        self.supports_seed = supports_seed
        self._client = client if client is not None else httpx.Client(timeout=timeout)

    def _wire_body(self, request: BackendRequest) -> dict:
        return request.body

    def send(self, request: BackendRequest) -> dict:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}{self.path}"
        try:
            response = self._client.post(url, json=self._wire_body(request), headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"POST {url} failed: {exc}") from exc
        if response.status_code >= 500:
            raise TransportError(f"POST {url} returned {response.status_code}")
        if response.status_code >= 400:
            raise ProtocolError(
                f"POST {url} returned {response.status_code}: {response.text[:200]}"
            )
        try:
            body = response.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise ProtocolError(f"POST {url} returned non-JSON body: {exc}") from exc
        if not isinstance(body, dict):
            raise ProtocolError(f"POST {url} returned non-object JSON: {type(body).__name__}")
        return body


class HttpChatTransport(_HttpTransportBase):
    """OpenAI-compatible chat completions endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        supports_seed: bool = True,
        timeout: float = 60.0,
        client: Optional[httpx.Client] = None,
    ):
        super().__init__(
            base_url=base_url,
            path="/v1/chat/completions",
            endpoint_id=f"chat:{base_url.rstrip('/')}#{model}",
            model=model,
            api_key=api_key,
            supports_seed=supports_seed,
            timeout=timeout,
            client=client,
        )

    def _wire_body(self, request: BackendRequest) -> dict:
        if self.supports_seed:
            return request.body
        return {k: v for k, v in request.body.items() if k != "seed"}


class HttpDetectorTransport(_HttpTransportBase):
    def __init__(self, base_url, api_key=None, timeout=60.0, client=None):
        super().__init__(
            base_url=base_url,
            path="/detect",
            endpoint_id=f"detector:{base_url.rstrip('/')}",
            api_key=api_key,
            timeout=timeout,
            client=client,
        )


class HttpScorerTransport(_HttpTransportBase):
    def __init__(self, base_url, api_key=None, timeout=60.0, client=None):
        super().__init__(
            base_url=base_url,
            path="/itm",
            endpoint_id=f"itm:{base_url.rstrip('/')}",
            api_key=api_key,
            timeout=timeout,
            client=client,
        )
