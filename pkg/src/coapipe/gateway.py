"""Client for chat-completion and embedding endpoints, plus deterministic mocks.

All pipeline stages talk to models through this one surface. Remote backends
speak the de-facto chat-completions JSON shape over HTTP; mock backends play
scripted responses (chat) or a seeded hash projection (embeddings) and never
touch the network, which makes every pipeline stage bit-reproducible in tests.

Retries, bounded concurrency, per-backend rate caps and token accounting all
live here so callers stay simple.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

import requests

from .errors import (
    BadStatusError,
    ConfigInvalidError,
    CountMismatchError,
    DimensionMismatchError,
    MockScriptExhausted,
    RequestTimeoutError,
    RetryableStatusError,
    TransportError,
    ValidationError,
)
from .fileio import read_jsonl

CHAT_KINDS = ("remote_chat", "mock_chat")
EMBED_KINDS = ("remote_embed", "mock_embed")

Message = tuple[str, str]  # (role, content)

# transport: (url, headers, json_payload, timeout_s) -> (status_code, body_text)
Transport = Callable[[str, dict, dict, float], tuple[int, str]]


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.8
    top_p: float = 0.95
    top_k: int | None = None
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValidationError("temperature must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValidationError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise ValidationError("top_k must be positive when set")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    backend_id: str
    attempt_count: int
    usage_estimated: bool = False


@dataclass(frozen=True)
class BackendSpec:
    """Declarative description of one endpoint (or mock stand-in)."""

    name: str
    kind: str
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""
    script_path: str = ""
    script: tuple = ()  # inline mock entries, same shape as script file records
    seed: int = 0
    dim: int = 32
    timeout: float = 60.0

    def __post_init__(self):
        if self.kind not in CHAT_KINDS + EMBED_KINDS:
            raise ConfigInvalidError(f"backends.{self.name}.kind", f"unknown kind {self.kind!r}")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 0.5
    factor: float = 2.0
    jitter: bool = True


class UsageMeter:
    """Thread-safe token accounting, additive over calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.calls = 0

    def record(self, prompt_tokens: int, completion_tokens: int) -> None:
        with self._lock:
            self.prompt_tokens += prompt_tokens
            self.completion_tokens += completion_tokens
            self.calls += 1

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def estimate_tokens(text: str) -> int:
    """Fallback token count when the server reports no usage: ceil(bytes/4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def request_fingerprint(messages: Sequence[Message]) -> str:
    """Stable 16-hex-digit hash of a message list, used to key mock scripts."""
    canon = json.dumps(
        [[role, content] for role, content in messages],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


class _ScriptEntry:
    __slots__ = ("text", "prompt_tokens", "completion_tokens", "fails_remaining")

    def __init__(self, record: dict):
        self.text = record.get("text", "")
        self.prompt_tokens = int(record.get("prompt_tokens", 0))
        self.completion_tokens = int(record.get("completion_tokens", 0))
        self.fails_remaining = int(record.get("fail_times", 0))


class _MockChatState:
    """Scripted response queues: keyed by request hash, plus a sequential tail."""

    def __init__(self, records: Sequence[dict]):
        self.keyed: dict[str, deque[_ScriptEntry]] = {}
        sequential: list[tuple[int, int, dict]] = []
        for position, record in enumerate(records):
            if "key" in record:
                self.keyed.setdefault(record["key"], deque()).append(_ScriptEntry(record))
            else:
                sequential.append((int(record.get("seq", position)), position, record))
        sequential.sort()
        self.sequential: deque[_ScriptEntry] = deque(
            _ScriptEntry(rec) for _, _, rec in sequential
        )

    def resolve(self, fingerprint: str) -> _ScriptEntry:
        queue = self.keyed.get(fingerprint)
        if queue:
            entry = queue[0]
            if entry.fails_remaining > 0:
                entry.fails_remaining -= 1
                raise TransportError(f"scripted failure for request {fingerprint}")
            queue.popleft()
            return entry
        if self.sequential:
            entry = self.sequential[0]
            if entry.fails_remaining > 0:
                entry.fails_remaining -= 1
                raise TransportError("scripted failure (sequential entry)")
            self.sequential.popleft()
            return entry
        raise MockScriptExhausted(f"no scripted response for request {fingerprint}")


def _load_script(spec: BackendSpec) -> list[dict]:
    if spec.script:
        return [dict(r) for r in spec.script]
    if spec.script_path:
        return [record for _, record in read_jsonl(spec.script_path)]
    return []


def mock_embedding(text: str, seed: int, dim: int) -> np.ndarray:
    """Deterministic unit vector per (text, seed): hash-seeded projection."""
    digest = hashlib.sha256(f"{seed}|{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def _requests_transport(url: str, headers: dict, payload: dict, timeout: float) -> tuple[int, str]:
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.Timeout as exc:
        raise RequestTimeoutError(f"timeout calling {url}") from exc
    except requests.RequestException as exc:
        raise TransportError(f"transport failure calling {url}: {exc}") from exc
    return resp.status_code, resp.text


class Gateway:
    """Issues chat/embed calls with retries, a concurrency cap and rate caps.

    One Gateway may serve several backends; each BackendSpec instance gets
    its own mock script state for the lifetime of the Gateway.
    """

    def __init__(
        self,
        max_in_flight: int = 4,
        retry: RetryPolicy = RetryPolicy(),
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        rate_limit_per_s: float = 0.0,
        jitter_seed: int = 0,
    ):
        if max_in_flight < 1:
            raise ValidationError("max_in_flight must be >= 1")
        self.retry = retry
        self.usage = UsageMeter()
        self._transport = transport or _requests_transport
        self._sleep = sleep
        self._clock = clock
        self._min_interval = 1.0 / rate_limit_per_s if rate_limit_per_s > 0 else 0.0
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._rng = random.Random(jitter_seed)
        self._lock = threading.Lock()
        # keyed by (name, id(spec)); the spec is retained so ids stay unique
        self._mock_chat: dict[tuple[str, int], tuple[BackendSpec, _MockChatState]] = {}
        self._last_call: dict[str, float] = {}

    # -- plumbing ------------------------------------------------------

    def _mock_state(self, spec: BackendSpec) -> _MockChatState:
        key = (spec.name, id(spec))
        with self._lock:
            entry = self._mock_chat.get(key)
            if entry is None:
                entry = (spec, _MockChatState(_load_script(spec)))
                self._mock_chat[key] = entry
            return entry[1]

    def _respect_rate_cap(self, backend_name: str) -> None:
        if self._min_interval <= 0:
            return
        with self._lock:
            now = self._clock()
            last = self._last_call.get(backend_name)
            wait = 0.0 if last is None else max(0.0, last + self._min_interval - now)
            self._last_call[backend_name] = now + wait
        if wait > 0:
            self._sleep(wait)

    def _headers(self, spec: BackendSpec) -> dict:
        headers = {"Content-Type": "application/json"}
        if spec.api_key_env:
            token = os.environ.get(spec.api_key_env)
            if not token:
                raise ConfigInvalidError(
                    f"backends.{spec.name}.api_key_env",
                    f"environment variable {spec.api_key_env!r} is not set",
                )
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post_json(self, spec: BackendSpec, payload: dict) -> dict:
        status, body = self._transport(
            spec.endpoint, self._headers(spec), payload, spec.timeout
        )
        if status == 429 or 500 <= status <= 599:
            raise RetryableStatusError(status, body)
        if not 200 <= status < 300:
            raise BadStatusError(status, body)
        try:
            return json.loads(body)
        except json.JSONDecodeError as exc:
            raise BadStatusError(status, f"invalid JSON body: {body[:120]}") from exc

    def _with_retries(self, attempt: Callable[[], object]) -> tuple[object, int]:
        attempts = 0
        while True:
            attempts += 1
            self._sem.acquire()
            try:
                return attempt(), attempts
            except TransportError:
                # includes RequestTimeoutError and RetryableStatusError
                if attempts >= self.retry.max_attempts:
                    raise
                delay = self.retry.base_delay * self.retry.factor ** (attempts - 1)
                if self.retry.jitter:
                    with self._lock:
                        delay *= 0.5 + 0.5 * self._rng.random()
            finally:
                self._sem.release()
            self._sleep(delay)

    # -- chat ----------------------------------------------------------

    def chat_complete(
        self,
        backend: BackendSpec,
        messages: Sequence[Message],
        params: SamplingParams,
    ) -> GenerationResult:
        """One completion. Transient failures are retried with backoff."""
        if backend.kind not in CHAT_KINDS:
            raise ValidationError(f"backend {backend.name!r} is not a chat backend")
        if not messages:
            raise ValidationError("messages must be non-empty")

        if backend.kind == "mock_chat":
            state = self._mock_state(backend)
            fingerprint = request_fingerprint(messages)

            def attempt() -> tuple[str, int, int, bool]:
                with self._lock:
                    entry = state.resolve(fingerprint)
                return entry.text, entry.prompt_tokens, entry.completion_tokens, False

        else:
            payload: dict = {
                "model": backend.model,
                "messages": [{"role": r, "content": c} for r, c in messages],
                "temperature": params.temperature,
                "top_p": params.top_p,
                "max_tokens": params.max_tokens,
            }
            if params.top_k is not None:
                payload["top_k"] = params.top_k
            if params.seed is not None:
                payload["seed"] = params.seed

            def attempt() -> tuple[str, int, int, bool]:
                self._respect_rate_cap(backend.name)
                reply = self._post_json(backend, payload)
                try:
                    text = reply["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError) as exc:
                    raise BadStatusError(200, "response missing choices[0].message.content") from exc
                usage = reply.get("usage") or {}
                if "prompt_tokens" in usage and "completion_tokens" in usage:
                    return text, int(usage["prompt_tokens"]), int(usage["completion_tokens"]), False
                prompt_text = "".join(c for _, c in messages)
                return text, estimate_tokens(prompt_text), estimate_tokens(text), True

        (text, prompt_tokens, completion_tokens, estimated), attempts = self._with_retries(attempt)
        self.usage.record(prompt_tokens, completion_tokens)
        return GenerationResult(
            text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            backend_id=backend.name,
            attempt_count=attempts,
            usage_estimated=estimated,
        )

    # -- embeddings ----------------------------------------------------

    def embed(self, backend: BackendSpec, texts: Sequence[str]) -> list[np.ndarray]:
        """One vector per text, order preserving, uniform dimension."""
        if backend.kind not in EMBED_KINDS:
            raise ValidationError(f"backend {backend.name!r} is not an embed backend")
        if not texts:
            raise ValidationError("texts must be non-empty")

        if backend.kind == "mock_embed":
            return [mock_embedding(t, backend.seed, backend.dim) for t in texts]

        payload = {"model": backend.model, "input": list(texts)}

        def attempt() -> list[np.ndarray]:
            self._respect_rate_cap(backend.name)
            reply = self._post_json(backend, payload)
            data = reply.get("data")
            if not isinstance(data, list):
                raise BadStatusError(200, "response missing 'data' list")
            if len(data) != len(texts):
                raise CountMismatchError(
                    f"asked for {len(texts)} embeddings, got {len(data)}"
                )
            if all(isinstance(item, dict) and "index" in item for item in data):
                data = sorted(data, key=lambda item: item["index"])
            vectors = [np.asarray(item["embedding"], dtype=np.float64) for item in data]
            dims = {v.shape[0] for v in vectors}
            if len(dims) > 1:
                raise DimensionMismatchError(f"server returned ragged vectors: dims {sorted(dims)}")
            return vectors

        vectors, _ = self._with_retries(attempt)
        return vectors
