"""Transport layer for chat-completions-style multimodal endpoints.

Speaks the OpenAI-compatible chat protocol with images passed as base64 data
URLs, retries transient failures with exponential backoff, and caches raw
responses content-addressed on the full request so reruns are deterministic
and offline. Parsing of model output into JSON lives here too (extract_json),
since every stage shares it.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx

from .errors import (
    AuthError,
    GatewayTimeout,
    MalformedJson,
    NoJsonFound,
    RetriesExhausted,
    TransportError,
)

DEFAULT_TIMEOUT_S = 120.0
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ImagePayload:
    """Encoded image bytes plus media type, as sent to the endpoint."""

    data: bytes
    media_type: str = "image/png"

    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class ModelRequest:
    model_name: str
    system_text: str
    user_text: str
    image: ImagePayload | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    # Bumped on content-level retries so the cache does not replay a bad response.
    attempt: int = 0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")

    def cache_key(self) -> str:
        parts = json.dumps(
            [
                self.model_name,
                self.system_text,
                self.user_text,
                self.image.digest() if self.image else None,
                self.temperature,
                self.max_tokens,
                self.attempt,
            ],
            sort_keys=True,
        )
        return hashlib.sha256(parts.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ModelResponse:
    raw_text: str
    token_usage: dict[str, int] | None = None
    latency_s: float = 0.0
    from_cache: bool = False


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay_s: float = 1.0
    factor: float = 2.0

    def delay(self, attempt_index: int) -> float:
        return self.base_delay_s * self.factor**attempt_index


class VlmClient:
    """Shareable client for one endpoint. Thread-safe; at most
    `max_concurrency` requests are in flight at a time."""

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        *,
        cache_dir: str | Path | None = None,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        transport: httpx.BaseTransport | None = None,
        sleeper: Callable[[float], None] = time.sleep,
        max_concurrency: int = 4,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._sleep = sleeper
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._http = httpx.Client(timeout=timeout_s, transport=transport)

    def close(self) -> None:
        self._http.close()

    # -- caching -----------------------------------------------------------

    def _cache_path(self, req: ModelRequest) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{req.cache_key()}.json"

    def _cache_read(self, req: ModelRequest) -> ModelResponse | None:
        path = self._cache_path(req)
        if path is None or not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return ModelResponse(
            raw_text=data["raw_text"],
            token_usage=data.get("token_usage"),
            latency_s=0.0,
            from_cache=True,
        )

    def _cache_write(self, req: ModelRequest, resp: ModelResponse) -> None:
        path = self._cache_path(req)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "raw_text": resp.raw_text,
            "token_usage": resp.token_usage,
            "model_name": req.model_name,
        }
        path.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")

    # -- request construction ------------------------------------------------

    def _build_body(self, req: ModelRequest) -> dict:
        user_content: list | str
        if req.image is not None:
            user_content = [
                {"type": "text", "text": req.user_text},
                {"type": "image_url", "image_url": {"url": req.image.data_url()}},
            ]
        else:
            user_content = req.user_text
        messages = []
        if req.system_text:
            messages.append({"role": "system", "content": req.system_text})
        messages.append({"role": "user", "content": user_content})
        return {
            "model": req.model_name,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }

    # -- completion ----------------------------------------------------------

    def complete(self, req: ModelRequest, retry_policy: RetryPolicy | None = None) -> ModelResponse:
        """Return the first successful response, retrying transport errors and
        HTTP 429/5xx with exponential backoff."""
        cached = self._cache_read(req)
        if cached is not None:
            return cached

        policy = retry_policy or RetryPolicy()
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self._build_body(req)

        last_error: Exception | None = None
        timed_out = 0
        for attempt in range(policy.max_attempts):
            if attempt > 0:
                self._sleep(policy.delay(attempt - 1))
            try:
                with self._semaphore:
                    started = time.monotonic()
                    http_resp = self._http.post(url, json=body, headers=headers)
                    latency = time.monotonic() - started
            except httpx.TimeoutException as err:
                timed_out += 1
                last_error = err
                continue
            except httpx.HTTPError as err:
                last_error = err
                continue

            if http_resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credential (HTTP {http_resp.status_code})")
            if http_resp.status_code in RETRYABLE_STATUSES:
                last_error = TransportError(f"HTTP {http_resp.status_code}")
                continue
            if http_resp.status_code != 200:
                raise TransportError(
                    f"HTTP {http_resp.status_code}: {http_resp.text[:200]}"
                )

            resp = self._parse_response(http_resp, latency)
            self._cache_write(req, resp)
            return resp

        if timed_out == policy.max_attempts:
            raise GatewayTimeout(f"all {policy.max_attempts} attempts timed out")
        raise RetriesExhausted(
            f"gave up after {policy.max_attempts} attempts: {last_error}", last_error
        )

    @staticmethod
    def _parse_response(http_resp: httpx.Response, latency: float) -> ModelResponse:
        try:
            data = http_resp.json()
            content = data["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as err:
            raise TransportError(f"unexpected response body: {err}") from err
        usage = data.get("usage")
        token_usage = None
        if isinstance(usage, dict):
            token_usage = {k: v for k, v in usage.items() if isinstance(v, int)}
        return ModelResponse(raw_text=content, token_usage=token_usage, latency_s=latency)


class FixtureVlmClient:
    """Drop-in replacement for VlmClient that replays canned raw responses.

    Responses are consumed in order from per-stage queues; when a queue runs
    dry its last response is replayed, so retry loops terminate
    deterministically. Stages are recognized by a marker substring in the
    request's system text.
    """

    STAGE_MARKERS = (
        ("extract", "causal structure of the scene"),
        ("manipulate", "changing one thing in a scene"),
        ("evaluate", "answer simple questions"),
    )

    def __init__(self, responses: dict[str, list[str]]):
        self._queues = {stage: list(texts) for stage, texts in responses.items()}
        self.calls: list[tuple[str, ModelRequest]] = []

    @classmethod
    def from_directory(cls, fixture_dir: str | Path) -> "FixtureVlmClient":
        """Load fixtures named <stage>.txt or <stage>_<n>.txt (n orders retries)."""
        fixture_dir = Path(fixture_dir)
        responses: dict[str, list[str]] = {}
        for path in sorted(fixture_dir.iterdir()):
            if path.suffix not in (".txt", ".json") or not path.is_file():
                continue
            stage = path.stem.rsplit("_", 1)[0] if path.stem[-1].isdigit() else path.stem
            responses.setdefault(stage, []).append(path.read_text(encoding="utf-8"))
        return cls(responses)

    def _classify(self, req: ModelRequest) -> str:
        for stage, marker in self.STAGE_MARKERS:
            if marker in req.system_text:
                return stage
        return "describe"

    def complete(self, req: ModelRequest, retry_policy: RetryPolicy | None = None) -> ModelResponse:
        stage = self._classify(req)
        self.calls.append((stage, req))
        queue = self._queues.get(stage)
        if not queue:
            raise TransportError(f"no fixture response available for stage {stage!r}")
        text = queue.pop(0) if len(queue) > 1 else queue[0]
        return ModelResponse(raw_text=text, from_cache=True)

    def close(self) -> None:
        pass


# --- JSON extraction --------------------------------------------------------


_FENCE_LINE = re.compile(r"^[ \t]*```[a-zA-Z0-9_-]*[ \t]*$", re.MULTILINE)


def _strip_code_fences(text: str) -> str:
    # Remove fence markers themselves (```json, ```), keeping their contents.
    # Full fence lines lose their language tag; inline backtick runs are
    # dropped but the text between them survives.
    return _FENCE_LINE.sub("", text).replace("```", "")


def _scan_balanced_object(text: str):
    """Find and parse the first balanced {...} block; string-aware."""
    start = text.find("{")
    if start < 0:
        raise NoJsonFound("no JSON object in model output")

    depth = 0
    in_string = False
    escaped = False
    for pos in range(start, len(text)):
        ch = text[pos]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                span = text[start : pos + 1]
                try:
                    return json.loads(span)
                except json.JSONDecodeError as err:
                    raise MalformedJson(f"JSON block does not parse: {err}", span) from err
    raise MalformedJson("unbalanced JSON object", text[start:])


def extract_json(raw_text: str):
    """Parse the first balanced {...} block out of free-form model output.

    Surrounding prose is ignored. The raw text is scanned as-is first, so
    valid JSON always round-trips; when that scan fails, code-fence markers
    are stripped and the scan retried, which recovers output where the model
    wrapped parts of the object in ``` fences. Raises NoJsonFound when there
    is no opening brace at all, and MalformedJson (carrying the offending
    span) when the block is unbalanced or does not parse.
    """
    try:
        return _scan_balanced_object(raw_text)
    except (NoJsonFound, MalformedJson):
        stripped = _strip_code_fences(raw_text)
        if stripped == raw_text:
            raise
        return _scan_balanced_object(stripped)
