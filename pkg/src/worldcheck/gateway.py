"""Vision chat-completions gateway.

Speaks the common chat-completions wire protocol (system plus user message,
image attached as a base64 data URL), extracts a JSON payload from the
reply, validates it against a schema descriptor, and re-prompts with the
validator's message when the reply does not conform. Responses are cached
on disk keyed by request content, so an unchanged run replays without any
network traffic. A scripted mock backend stands in for the endpoint in
tests and offline runs.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import requests
from jsonschema import Draft202012Validator

from .errors import (
    PayloadTooLargeError,
    SchemaViolationError,
    ScriptExhaustedError,
    TransportError,
)

logger = logging.getLogger("worldcheck.gateway")

API_KEY_ENV = "WORLDCHECK_API_KEY"
BASE_URL_ENV = "WORLDCHECK_BASE_URL"
CACHE_DIR_ENV = "WORLDCHECK_CACHE_DIR"

# Hard cap on attached image bytes, checked before any network call.
MAX_IMAGE_BYTES = 16 * 1024 * 1024


@dataclass(frozen=True)
class EndpointConfig:
    """Connection settings for one judge endpoint."""

    base_url: str
    model_name: str
    api_key: str | None = field(default=None, repr=False)
    timeout: float = 120.0
    max_retries: int = 2
    temperature: float = 0.0
    max_concurrent_requests: int = 4
    retry_backoff: float = 0.5

    def __post_init__(self) -> None:
        if not self.base_url:
            raise ValueError("base_url must be non-empty")
        if not self.model_name:
            raise ValueError("model_name must be non-empty")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")
        if self.retry_backoff < 0:
            raise ValueError("retry_backoff must be >= 0")

    def fingerprint(self) -> str:
        """Identity hash of the judge, safe to store (no secrets)."""
        payload = json.dumps(
            {
                "base_url": self.base_url,
                "model_name": self.model_name,
                "temperature": self.temperature,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def resolved_api_key(self) -> str | None:
        return self.api_key or os.environ.get(API_KEY_ENV)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data: bytes


@dataclass(frozen=True)
class ChatRequest:
    """One system-plus-user exchange; at most one image attachment."""

    system_text: str
    user_parts: tuple[TextPart | ImagePart, ...]
    response_format_hint: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if not self.user_parts:
            raise ValueError("request needs at least one user part")
        images = [p for p in self.user_parts if isinstance(p, ImagePart)]
        if len(images) > 1:
            raise ValueError("at most one image per request")
        if not self.response_format_hint:
            raise ValueError("response_format_hint must be non-empty")

    def image(self) -> ImagePart | None:
        for part in self.user_parts:
            if isinstance(part, ImagePart):
                return part
        return None

    def texts(self) -> tuple[str, ...]:
        return tuple(p.text for p in self.user_parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class StructuredResponse:
    raw_text: str
    parsed: dict
    attempts: int
    cache_hit: bool


class SchemaCheckFailed(ValueError):
    """Internal: reply parsed as JSON but violated the schema contract."""


class SchemaSpec:
    """Schema descriptor: a JSON schema plus an optional semantic check.

    The semantic check covers constraints a JSON schema cannot express
    (ordering, cross-field rules); it raises SchemaCheckFailed with a
    message suitable for the repair re-prompt.
    """

    def __init__(
        self,
        name: str,
        json_schema: Mapping,
        semantic_check: Callable[[dict], None] | None = None,
    ):
        self.name = name
        self.json_schema = dict(json_schema)
        self.semantic_check = semantic_check
        self._validator = Draft202012Validator(self.json_schema)

    def validate(self, doc: object) -> None:
        errors = sorted(self._validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            first = errors[0]
            where = "/".join(str(p) for p in first.absolute_path) or "(root)"
            raise SchemaCheckFailed(f"at {where}: {first.message}")
        if self.semantic_check is not None:
            self.semantic_check(doc)  # may raise SchemaCheckFailed


def cache_key(req: ChatRequest, cfg: EndpointConfig) -> str:
    """Content hash of everything that determines the reply.

    Covers model name, temperature, schema hint, system text and every
    user part including raw image bytes. Endpoint URL and auth are
    deliberately excluded: the same question to the same model is the
    same cache entry wherever it is served from.
    """
    h = hashlib.sha256()
    h.update(cfg.model_name.encode("utf-8"))
    h.update(b"\x00")
    h.update(repr(cfg.temperature).encode("ascii"))
    h.update(b"\x00")
    h.update(req.response_format_hint.encode("utf-8"))
    h.update(b"\x00")
    h.update(req.system_text.encode("utf-8"))
    for part in req.user_parts:
        if isinstance(part, TextPart):
            h.update(b"\x01text\x00")
            h.update(part.text.encode("utf-8"))
        else:
            h.update(b"\x01image\x00")
            h.update(part.media_type.encode("utf-8"))
            h.update(b"\x00")
            h.update(part.data)
    return h.hexdigest()


class ResponseCache:
    """Content-addressed on-disk store of final validated replies."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            logger.warning("cache entry %s unreadable, treating as miss", key)
            return None

    def put(self, key: str, envelope: dict) -> None:
        path = self._path(key)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(envelope, sort_keys=True), encoding="utf-8")
            os.replace(tmp, path)


class HttpBackend:
    """Talks to an OpenAI-style /chat/completions endpoint."""

    def __init__(self, session: requests.Session | None = None):
        self._session = session or requests.Session()

    def complete(self, cfg: EndpointConfig, req: ChatRequest) -> str:
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        content: list[dict] = []
        for part in req.user_parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                encoded = base64.b64encode(part.data).decode("ascii")
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": f"data:{part.media_type};base64,{encoded}"},
                    }
                )
        payload = {
            "model": cfg.model_name,
            "temperature": cfg.temperature,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": content},
            ],
        }
        headers = {"Content-Type": "application/json"}
        api_key = cfg.resolved_api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self._session.post(
                url, json=payload, headers=headers, timeout=cfg.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"request to {url} failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportError(
                f"endpoint returned HTTP {response.status_code}: {response.text[:500]}"
            )
        try:
            body = response.json()
            return body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {exc}") from exc


@dataclass
class RecordedRequest:
    """What the mock backend saw, for assertions in tests."""

    schema_hint: str
    system_text: str
    texts: tuple[str, ...]
    image: bytes | None
    media_type: str | None
    model_name: str


@dataclass
class MockRule:
    """Scripted responses served when a request matches this rule.

    ``schema`` narrows by response_format_hint, ``contains`` by substring
    over system text and user text parts. Responses are consumed in order;
    with ``repeat`` the last one is served forever.
    """

    responses: list[str]
    schema: str | None = None
    contains: str | None = None
    repeat: bool = False
    cursor: int = 0

    def matches(self, req: ChatRequest) -> bool:
        if self.schema is not None and req.response_format_hint != self.schema:
            return False
        if self.contains is not None:
            haystack = "\n".join((req.system_text, *req.texts()))
            if self.contains not in haystack:
                return False
        return True

    def next_response(self) -> str | None:
        if self.cursor < len(self.responses):
            response = self.responses[self.cursor]
            self.cursor += 1
            return response
        if self.repeat and self.responses:
            return self.responses[-1]
        return None


class MockBackend:
    """Deterministic scripted stand-in for the real endpoint.

    Records every request it receives. Raises ScriptExhaustedError when no
    rule has a response left for a request, so an over-consuming run fails
    loudly instead of looping.
    """

    def __init__(self, rules: Iterable[MockRule] = (), delay: float = 0.0):
        self.rules = list(rules)
        self.requests: list[RecordedRequest] = []
        self.delay = delay
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0

    @classmethod
    def from_script(cls, script: Mapping) -> "MockBackend":
        """Build from the mock-script mapping accepted by the CLI.

        Either {"sequence": [...]} served in order to any request, or
        {"rules": [{"schema": ..., "contains": ..., "responses": [...],
        "repeat": bool}, ...]}. Response items may be raw strings or JSON
        objects (serialized on load).
        """

        def as_text(item: object) -> str:
            return item if isinstance(item, str) else json.dumps(item)

        if "sequence" in script:
            return cls([MockRule(responses=[as_text(x) for x in script["sequence"]])])
        rules = []
        for entry in script.get("rules", ()):
            rules.append(
                MockRule(
                    responses=[as_text(x) for x in entry.get("responses", ())],
                    schema=entry.get("schema"),
                    contains=entry.get("contains"),
                    repeat=bool(entry.get("repeat", False)),
                )
            )
        return cls(rules)

    def complete(self, cfg: EndpointConfig, req: ChatRequest) -> str:
        image = req.image()
        with self._lock:
            self.requests.append(
                RecordedRequest(
                    schema_hint=req.response_format_hint,
                    system_text=req.system_text,
                    texts=req.texts(),
                    image=image.data if image else None,
                    media_type=image.media_type if image else None,
                    model_name=cfg.model_name,
                )
            )
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
            response: str | None = None
            for rule in self.rules:
                if rule.matches(req):
                    response = rule.next_response()
                    if response is not None:
                        break
        try:
            if response is None:
                raise ScriptExhaustedError(
                    f"no scripted response for hint {req.response_format_hint!r}"
                )
            if self.delay:
                time.sleep(self.delay)
            return response
        finally:
            with self._lock:
                self._in_flight -= 1


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json_payload(text: str) -> str:
    """Best-effort extraction of the JSON object embedded in a reply.

    Tries the whole text, then the first fenced code block, then the
    outermost brace span. Returns a candidate string; the caller parses.
    """
    candidate = text.strip()
    if candidate.startswith("{") and candidate.endswith("}"):
        return candidate
    fence = _FENCE_RE.search(text)
    if fence:
        inner = fence.group(1).strip()
        if inner:
            return inner
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        return text[start : end + 1]
    return candidate


def _repair_request(original: ChatRequest, raw: str, problem: str) -> ChatRequest:
    note = (
        "Your previous reply could not be used.\n"
        f"Reply was:\n{raw[:2000]}\n\n"
        f"Problem: {problem}\n\n"
        "Reply again with only a JSON object that satisfies the required schema."
    )
    return ChatRequest(
        system_text=original.system_text,
        user_parts=original.user_parts + (TextPart(note),),
        response_format_hint=original.response_format_hint,
    )


class Gateway:
    """Backend plus cache plus a concurrency limiter.

    complete_structured is the single entry point: it enforces the image
    size cap, consults the cache, runs the instruct-validate-repair loop,
    and never lets more requests in flight than the config allows.
    """

    def __init__(self, backend, cache: ResponseCache | None = None):
        self.backend = backend
        self.cache = cache
        self._limiters: dict[int, threading.BoundedSemaphore] = {}
        self._limiter_lock = threading.Lock()

    def _limiter(self, cfg: EndpointConfig) -> threading.BoundedSemaphore:
        with self._limiter_lock:
            limiter = self._limiters.get(cfg.max_concurrent_requests)
            if limiter is None:
                limiter = threading.BoundedSemaphore(cfg.max_concurrent_requests)
                self._limiters[cfg.max_concurrent_requests] = limiter
            return limiter

    def complete_structured(
        self, cfg: EndpointConfig, req: ChatRequest, schema: SchemaSpec
    ) -> StructuredResponse:
        image = req.image()
        if image is not None and len(image.data) > MAX_IMAGE_BYTES:
            raise PayloadTooLargeError(
                f"image is {len(image.data)} bytes, limit is {MAX_IMAGE_BYTES}"
            )
        key = cache_key(req, cfg)
        if self.cache is not None:
            envelope = self.cache.get(key)
            if envelope is not None:
                try:
                    parsed = json.loads(extract_json_payload(envelope["raw_text"]))
                    schema.validate(parsed)
                except (KeyError, ValueError):
                    logger.warning("cache entry %s no longer validates, refetching", key)
                else:
                    logger.debug("cache hit for %s", key)
                    return StructuredResponse(
                        raw_text=envelope["raw_text"],
                        parsed=parsed,
                        attempts=int(envelope.get("attempts", 1)),
                        cache_hit=True,
                    )
        limiter = self._limiter(cfg)
        current = req
        attempts = 0
        last_raw: str | None = None
        last_problem = ""
        max_attempts = cfg.max_retries + 1
        while attempts < max_attempts:
            attempts += 1
            try:
                with limiter:
                    raw = self.backend.complete(cfg, current)
            except ScriptExhaustedError:
                raise
            except TransportError as exc:
                if attempts >= max_attempts:
                    raise TransportError(
                        f"{exc} (after {attempts} attempts)", attempts=attempts
                    ) from exc
                logger.warning("transport error (attempt %d): %s", attempts, exc)
                if cfg.retry_backoff:
                    time.sleep(cfg.retry_backoff * (2 ** (attempts - 1)))
                continue
            last_raw = raw
            try:
                parsed = json.loads(extract_json_payload(raw))
            except json.JSONDecodeError as exc:
                last_problem = f"reply is not valid JSON: {exc.msg}"
            else:
                try:
                    schema.validate(parsed)
                except SchemaCheckFailed as exc:
                    last_problem = str(exc)
                else:
                    if self.cache is not None:
                        self.cache.put(key, {"raw_text": raw, "attempts": attempts})
                    return StructuredResponse(
                        raw_text=raw, parsed=parsed, attempts=attempts, cache_hit=False
                    )
            logger.info(
                "reply for %s failed validation (attempt %d): %s",
                req.response_format_hint,
                attempts,
                last_problem,
            )
            current = _repair_request(req, raw, last_problem)
        raise SchemaViolationError(
            f"no conforming reply for {req.response_format_hint!r}"
            f" after {attempts} attempts: {last_problem}",
            raw_text=last_raw,
            attempts=attempts,
        )
