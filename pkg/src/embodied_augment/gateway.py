"""Chat-model access for teacher and agent calls.

Two backends share one interface: :class:`HttpBackend` speaks the common
chat-completions JSON body over HTTP, :class:`MockBackend` answers offline
from a hash of the request. :class:`Gateway` adds a call budget, an on-disk
response cache and bounded parallel batches on top of either.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import random
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .core import IMAGE_FILE, canonical_json
from .templates import ImageSlot, PromptText

logger = logging.getLogger(__name__)

PURPOSES = ("enhance", "verify", "reason", "agent", "self_directed")
DEFAULT_CACHE_DIR = Path(".cache/gateway")


class GatewayError(Exception):
    """Base class for model-access failures."""


class EndpointUnreachable(GatewayError):
    pass


class HttpStatus(GatewayError):
    def __init__(self, code: int, body: str = ""):
        self.code = code
        self.body = body
        super().__init__(f"HTTP {code}: {body[:200]}")


class MalformedResponse(GatewayError):
    pass


class BudgetExceeded(GatewayError):
    pass


class CacheCorruption(GatewayError):
    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"cache entry {key}: {reason}")


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 0.7
    max_tokens: int = 512

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def to_json(self) -> dict:
        return {"temperature": self.temperature, "top_p": self.top_p, "max_tokens": self.max_tokens}


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: PromptText
    sampling: SamplingConfig = SamplingConfig()
    seed: int = 0
    purpose_tag: str = "enhance"
    call_ordinal: int = 1

    def __post_init__(self):
        if not self.messages.messages:
            raise ValueError("request has no messages")
        if self.purpose_tag not in PURPOSES:
            raise ValueError(f"unknown purpose {self.purpose_tag!r}")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend_id: str
    latency: float = 0.0
    cache_hit: bool = False
    attempts: int = 1
    key: str = ""


def cache_key(backend_id: str, request: ChatRequest) -> str:
    """Hex digest identifying a request for caching and mock sampling."""
    doc = {
        "backend_id": backend_id,
        "model_id": request.model_id,
        "messages": request.messages.to_json(),
        "sampling": request.sampling.to_json(),
        "seed": request.seed,
        "purpose": request.purpose_tag,
        "call_ordinal": request.call_ordinal,
    }
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


class Backend(Protocol):
    backend_id: str
    is_network: bool

    def complete(self, request: ChatRequest) -> tuple[str, int]:
        """Return (text, attempts)."""
        ...


def _unit_interval(digest: str, salt: str = "") -> float:
    h = hashlib.sha256((salt + digest).encode("ascii")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


_AGENT_VERBS = ("goto", "pickup", "put", "open", "close", "toggle_on", "toggle_off", "slice")
_OBS_LIST_RE = re.compile(r"^(?:Objects here|Places):\s*(.+)$", re.MULTILINE)


class MockBackend:
    """Deterministic offline stand-in for a chat model.

    Replies depend only on the request digest. ``verify`` requests answer
    Yes with probability ``yes_probability``; ``enhance``/``self_directed``
    replies echo the instruction; ``agent`` replies pick a random action over
    names visible in the latest observation.
    """

    is_network = False

    def __init__(self, yes_probability: float = 1.0, backend_id: str = "mock", done_probability: float = 0.05):
        if not 0.0 <= yes_probability <= 1.0:
            raise ValueError("yes_probability must be in [0, 1]")
        self.yes_probability = yes_probability
        self.done_probability = done_probability
        self.backend_id = backend_id

    def complete(self, request: ChatRequest) -> tuple[str, int]:
        digest = cache_key(self.backend_id, request)
        handler = getattr(self, f"_{request.purpose_tag}")
        return handler(request, digest), 1

    def _verify(self, request, digest):
        return "Yes" if _unit_interval(digest, "verify") < self.yes_probability else "No"

    def _enhance(self, request, digest):
        instruction = request.messages.substitution("human_instruction", "")
        return f"Enhanced: {instruction} [{request.messages.template_id} variant {digest[:8]}]"

    _self_directed = _enhance

    def _reason(self, request, digest):
        action = request.messages.substitution("action", "")
        goal = request.messages.substitution("enhanced_instruction", "")
        return (
            f"Reasoning: The current view and the task '{goal}' call for {action} now "
            f"(note {digest[:8]})."
        )

    def _agent(self, request, digest):
        rng = random.Random(digest)
        if rng.random() < self.done_probability:
            return "Reasoning: The task looks finished.\nAction: done"
        names: list[str] = []
        slots = request.messages.image_slots
        if slots:
            for match in _OBS_LIST_RE.finditer(slots[-1].observation.payload):
                listing = re.sub(r"\([^)]*\)", "", match.group(1))
                for item in listing.split(","):
                    token = item.strip()
                    if token and token != "nothing":
                        names.append(token)
        if not names:
            return "Reasoning: Nothing recognisable in view.\nAction: done"
        verb = rng.choice(_AGENT_VERBS)
        return f"Reasoning: Trying {verb} on {names[0]}.\nAction: {verb}({rng.choice(names)})"


def _encode_part(part, is_image: bool) -> dict:
    if not is_image:
        return {"type": "text", "text": part}
    obs = part.observation
    if obs.kind == IMAGE_FILE:
        mime = mimetypes.guess_type(obs.payload)[0] or "image/png"
        data = base64.b64encode(Path(obs.payload).read_bytes()).decode("ascii")
        return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}
    return {"type": "text", "text": f"```observation\n{obs.payload}\n```"}


def chat_payload(request: ChatRequest) -> dict:
    """Chat-completions request body for ``request``."""
    messages = []
    for m in request.messages.messages:
        content = [_encode_part(p, isinstance(p, ImageSlot)) for p in m.parts]
        messages.append({"role": m.role, "content": content})
    return {
        "model": request.model_id,
        "messages": messages,
        "temperature": request.sampling.temperature,
        "top_p": request.sampling.top_p,
        "max_tokens": request.sampling.max_tokens,
        "seed": request.seed,
    }


def _extract_text(body) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse(f"no choices[0].message.content in {str(body)[:200]}") from None
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise MalformedResponse("message content is not text")
    return content


class HttpBackend:
    """Chat-completions client with exponential backoff on transient failures."""

    is_network = True
    RETRY_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})

    def __init__(
        self,
        url: str,
        api_key_env: str = "OPENAI_API_KEY",
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backend_id: str | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.url = url
        self.api_key_env = api_key_env
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.backend_id = backend_id or f"http:{url}"
        self.calls = 0
        self._lock = threading.Lock()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, request: ChatRequest) -> tuple[str, int]:
        payload = chat_payload(request)
        last: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            with self._lock:
                self.calls += 1
            try:
                resp = self.client.post(self.url, json=payload, headers=self._headers())
            except httpx.TransportError as exc:
                last = EndpointUnreachable(f"{self.url}: {exc}")
                logger.warning("attempt %d/%d: %s", attempt, self.max_attempts, exc)
            else:
                if resp.status_code == 200:
                    try:
                        body = resp.json()
                    except ValueError:
                        raise MalformedResponse("response body is not JSON") from None
                    logger.debug("completed after %d attempt(s)", attempt)
                    return _extract_text(body), attempt
                last = HttpStatus(resp.status_code, resp.text)
                if resp.status_code not in self.RETRY_STATUS:
                    raise last
                logger.warning("attempt %d/%d: HTTP %d", attempt, self.max_attempts, resp.status_code)
            if attempt < self.max_attempts:
                self.sleep(min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1)))
        assert last is not None
        raise last


@dataclass
class GatewayStats:
    backend_calls: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    cache_corruptions: int = 0
    errors: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BatchSlot:
    response: ChatResponse | None = None
    error: Exception | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class Gateway:
    """Budgeted, optionally cached access to one backend.

    ``budget`` caps backend calls (cache hits are free). ``recorder``, when
    given, sees every request before it is served.
    """

    def __init__(
        self,
        backend: Backend,
        cache_dir: str | Path | None = None,
        budget: int | None = None,
        recorder: Callable[[ChatRequest], None] | None = None,
    ):
        self.backend = backend
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.budget = budget
        self.recorder = recorder
        self.stats = GatewayStats()
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    @property
    def network_calls(self) -> int:
        return getattr(self.backend, "calls", 0) if self.backend.is_network else 0

    def key(self, request: ChatRequest) -> str:
        return cache_key(self.backend_id, request)

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.recorder is not None:
            self.recorder(request)
        with self._lock:
            if self.budget is not None and self.stats.backend_calls >= self.budget:
                raise BudgetExceeded(f"run budget of {self.budget} calls exhausted")
            self.stats.backend_calls += 1
        start = time.perf_counter()
        try:
            text, attempts = self.backend.complete(request)
        except GatewayError:
            with self._lock:
                self.stats.errors += 1
            raise
        return ChatResponse(
            text=text,
            backend_id=self.backend_id,
            latency=time.perf_counter() - start,
            cache_hit=False,
            attempts=attempts,
            key=self.key(request),
        )

    def _entry_path(self, key: str) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / key[:2] / f"{key}.json"

    def _read_entry(self, key: str) -> str | None:
        path = self._entry_path(key)
        if not path.exists():
            return None
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            if not isinstance(doc, dict) or doc.get("key") != key or not isinstance(doc.get("text"), str):
                raise CacheCorruption(key, "key mismatch or missing text")
        except (ValueError, CacheCorruption) as exc:
            logger.warning("discarding corrupt cache entry %s: %s", key, exc)
            with self._lock:
                self.stats.cache_corruptions += 1
            path.unlink(missing_ok=True)
            return None
        return doc["text"]

    def _write_entry(self, key: str, response: ChatResponse) -> None:
        path = self._entry_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"key": key, "backend_id": response.backend_id, "text": response.text}
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, ensure_ascii=False)
        os.replace(tmp, path)

    def cached_complete(self, request: ChatRequest) -> ChatResponse:
        if self.cache_dir is None:
            return self.complete(request)
        key = self.key(request)
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            text = self._read_entry(key)
            if text is not None:
                if self.recorder is not None:
                    self.recorder(request)
                with self._lock:
                    self.stats.cache_hits += 1
                return ChatResponse(text, self.backend_id, 0.0, cache_hit=True, attempts=0, key=key)
            with self._lock:
                self.stats.cache_misses += 1
            response = self.complete(request)
            self._write_entry(key, response)
            return response

    def submit_batch(self, requests: Sequence[ChatRequest], max_in_flight: int = 4) -> list[BatchSlot]:
        """Serve ``requests`` with at most ``max_in_flight`` outstanding; output keeps input order."""
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

        def run(req: ChatRequest) -> BatchSlot:
            try:
                return BatchSlot(response=self.cached_complete(req))
            except Exception as exc:  # noqa: BLE001 - slot carries the error
                return BatchSlot(error=exc)

        if max_in_flight == 1:
            return [run(r) for r in requests]
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(run, requests))


def first_error(slots: Sequence[BatchSlot]) -> Exception | None:
    for slot in slots:
        if slot.error is not None:
            return slot.error
    return None
