"""Text-completion backends and the on-disk response cache.

Wire protocol for :class:`HttpBackend` (one POST per completion)::

    request  {"model": str, "prompt": str, "max_tokens": int,
              "temperature": float, "stop": [str] | null}
    response {"choices": [{"text": str}, ...],
              "usage": {"prompt_tokens": int, "completion_tokens": int}}

with ``Authorization: Bearer <token>`` when a credential variable is set.

Cache keys are the SHA-256 hex digest of the canonical JSON encoding
(sorted keys, no whitespace, UTF-8) of
``{"model", "prompt", "max_tokens", "temperature", "stop"}``.
Entries live at ``<root>/<key[:2]>/<key>.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Base class for completion failures."""


class ConfigError(BackendError):
    pass


class TransientExhausted(BackendError):
    """Retries ran out on timeouts, connection errors, 429 or 5xx."""


class PermanentRejection(BackendError):
    """The endpoint answered with a non-retryable 4xx status."""

    def __init__(self, status: int, body: str = "") -> None:
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class CacheCorruption(BackendError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    prompt: str
    max_tokens: int = 256
    temperature: float = 0.0
    stop: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.stop is not None and not isinstance(self.stop, tuple):
            object.__setattr__(self, "stop", tuple(self.stop))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "prompt": self.prompt,
            "max_tokens": self.max_tokens,
            "temperature": float(self.temperature),
            "stop": list(self.stop) if self.stop is not None else None,
        }


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    latency_ms: int = 0
    from_cache: bool = False

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency_ms": self.latency_ms,
        }


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"  # "http" | "mock"
    model: str = "mock"
    endpoint_url: str | None = None
    auth_token_env: str | None = None
    timeout_ms: int = 60_000
    max_retries: int = 3
    backoff_base_ms: int = 500
    rate_limit_per_min: int | None = None
    mock_rules: tuple[tuple[str, str], ...] = ()
    mock_default: str = "neutral"

    def __post_init__(self) -> None:
        if self.kind not in ("http", "mock"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint_url:
            raise ConfigError("http backend requires endpoint_url")
        for name in ("timeout_ms", "backoff_base_ms"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be non-negative")
        if self.rate_limit_per_min is not None and self.rate_limit_per_min < 1:
            raise ConfigError("rate_limit_per_min must be positive")
        object.__setattr__(self, "mock_rules", tuple((str(p), str(t)) for p, t in self.mock_rules))

    @classmethod
    def from_dict(cls, data: dict) -> BackendConfig:
        data = dict(data)
        if "rules" in data:
            data["mock_rules"] = data.pop("rules")
        if "default" in data:
            data["mock_default"] = data.pop("default")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown backend config keys: {', '.join(sorted(unknown))}")
        data["mock_rules"] = tuple(tuple(rule) for rule in data.get("mock_rules", ()))
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model": self.model,
            "endpoint_url": self.endpoint_url,
            "auth_token_env": self.auth_token_env,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "backoff_base_ms": self.backoff_base_ms,
            "rate_limit_per_min": self.rate_limit_per_min,
            "mock_rules": [list(rule) for rule in self.mock_rules],
            "mock_default": self.mock_default,
        }


class Backend(Protocol):
    def complete(self, req: CompletionRequest) -> CompletionResponse: ...


class ScriptedMock:
    """Deterministic backend: first rule whose pattern is a substring of the prompt wins."""

    def __init__(self, rules: Sequence[tuple[str, str]] = (), default: str = "neutral") -> None:
        self.rules = tuple((pattern, text) for pattern, text in rules)
        self.default = default
        self.calls = 0
        self.prompts: list[str] = []
        self._lock = threading.Lock()

    def respond(self, prompt: str) -> str:
        for pattern, text in self.rules:
            if pattern in prompt:
                return text
        return self.default

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.calls += 1
            self.prompts.append(req.prompt)
        text = self.respond(req.prompt)
        return CompletionResponse(text=text, completion_tokens=len(text.split()), prompt_tokens=len(req.prompt.split()))


def scripted_mock(rules: Sequence[tuple[str, str]] = (), default: str = "neutral") -> ScriptedMock:
    return ScriptedMock(rules, default)


class TokenBucket:
    """Client-side limiter allowing ``rate_per_min`` acquisitions per minute."""

    def __init__(
        self,
        rate_per_min: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.capacity = float(rate_per_min)
        self.refill_per_s = rate_per_min / 60.0
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.refill_per_s)
                self._stamp = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.refill_per_s
            self._sleep(wait)


class HttpBackend:
    def __init__(
        self,
        config: BackendConfig,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if config.kind != "http":
            raise ConfigError("HttpBackend requires an http config")
        self.config = config
        self._sleep = sleep
        self._bucket = TokenBucket(config.rate_limit_per_min, sleep=sleep) if config.rate_limit_per_min else None
        self.attempts = 0

    def _token(self) -> str | None:
        name = self.config.auth_token_env
        if not name:
            return None
        token = os.environ.get(name)
        if not token:
            raise ConfigError(f"credential environment variable {name} is not set")
        return token

    def _post(self, req: CompletionRequest, token: str | None) -> tuple[dict, int]:
        body = json.dumps(req.to_dict()).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        request = urllib.request.Request(self.config.endpoint_url, data=body, headers=headers, method="POST")
        start = time.monotonic()
        with urllib.request.urlopen(request, timeout=self.config.timeout_ms / 1000) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return payload, int((time.monotonic() - start) * 1000)

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        token = self._token()
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay_ms = self.config.backoff_base_ms * 2 ** (attempt - 1)
                logger.warning("retrying completion (attempt %d) in %d ms: %s", attempt + 1, delay_ms, last_error)
                self._sleep(delay_ms / 1000)
            if self._bucket is not None:
                self._bucket.acquire()
            self.attempts += 1
            try:
                payload, latency = self._post(req, token)
            except urllib.error.HTTPError as exc:
                detail = exc.read().decode("utf-8", "replace")
                if exc.code == 429 or exc.code >= 500 or exc.code == 408:
                    last_error = exc
                    continue
                raise PermanentRejection(exc.code, detail) from exc
            except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
                last_error = exc
                continue
            except json.JSONDecodeError as exc:
                last_error = exc
                continue
            try:
                text = payload["choices"][0]["text"]
            except (KeyError, IndexError, TypeError) as exc:
                raise PermanentRejection(200, f"malformed completion payload: {payload!r}") from exc
            usage = payload.get("usage") or {}
            return CompletionResponse(
                text=text,
                prompt_tokens=usage.get("prompt_tokens"),
                completion_tokens=usage.get("completion_tokens"),
                latency_ms=latency,
            )
        raise TransientExhausted(
            f"completion failed after {self.config.max_retries + 1} attempts: {last_error}"
        ) from last_error


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "mock":
        return ScriptedMock(config.mock_rules, config.mock_default)
    return HttpBackend(config)


_BACKENDS: dict[BackendConfig, Backend] = {}
_BACKENDS_LOCK = threading.Lock()


def complete(config: BackendConfig, req: CompletionRequest) -> CompletionResponse:
    """Complete ``req`` with a backend shared per config (so rate limits are shared too)."""
    with _BACKENDS_LOCK:
        backend = _BACKENDS.get(config)
        if backend is None:
            backend = _BACKENDS[config] = make_backend(config)
    return backend.complete(req)


def cache_key(req: CompletionRequest) -> str:
    canonical = json.dumps(req.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class CacheStats:
    entries: int = 0
    bytes: int = 0
    models: dict[str, int] = field(default_factory=dict)


class ResponseCache:
    """Content-addressed, append-only response store (one JSON file per key)."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.hits = 0
        self.misses = 0
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def _key_lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, req: CompletionRequest) -> CompletionResponse | None:
        key = cache_key(req)
        path = self.path_for(key)
        if not path.exists():
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            if entry["key"] != key or entry["request"] != req.to_dict():
                raise ValueError("key/request mismatch")
            resp = entry["response"]
            return CompletionResponse(
                text=resp["text"],
                prompt_tokens=resp.get("prompt_tokens"),
                completion_tokens=resp.get("completion_tokens"),
                latency_ms=0,
                from_cache=True,
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheCorruption(f"corrupt cache entry {path}: {exc}") from exc

    def put(self, req: CompletionRequest, resp: CompletionResponse) -> None:
        """Store an entry unless one already exists; the first writer wins."""
        key = cache_key(req)
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {"key": key, "request": req.to_dict(), "response": resp.to_dict()}
        tmp = path.with_name(f".{key}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(entry, ensure_ascii=False, indent=1), encoding="utf-8")
        try:
            os.link(tmp, path)
        except FileExistsError:
            pass
        finally:
            tmp.unlink()

    def stats(self) -> CacheStats:
        stats = CacheStats()
        if not self.root.exists():
            return stats
        for path in sorted(self.root.glob("??/*.json")):
            stats.entries += 1
            stats.bytes += path.stat().st_size
            try:
                model = json.loads(path.read_text(encoding="utf-8"))["request"]["model"]
            except (ValueError, KeyError, TypeError) as exc:
                raise CacheCorruption(f"corrupt cache entry {path}: {exc}") from exc
            stats.models[model] = stats.models.get(model, 0) + 1
        return stats


def cached_complete(
    cache: ResponseCache,
    config: BackendConfig | None,
    req: CompletionRequest,
    backend: Backend | None = None,
) -> CompletionResponse:
    """Serve ``req`` from ``cache`` or delegate and persist before returning.

    ``backend`` overrides the shared backend built from ``config``.
    """
    hit = cache.get(req)
    if hit is not None:
        cache.hits += 1
        return hit
    with cache._key_lock(cache_key(req)):
        hit = cache.get(req)
        if hit is not None:
            cache.hits += 1
            return hit
        cache.misses += 1
        resp = backend.complete(req) if backend is not None else complete(config, req)
        cache.put(req, resp)
        stored = cache.get(req)
    # Another process may have won the write; report its text.
    return CompletionResponse(
        text=stored.text,
        prompt_tokens=resp.prompt_tokens,
        completion_tokens=resp.completion_tokens,
        latency_ms=resp.latency_ms,
        from_cache=False,
    )


class CachedBackend:
    """Backend wrapper routing every call through :func:`cached_complete`."""

    def __init__(self, backend: Backend, cache: ResponseCache) -> None:
        self.backend = backend
        self.cache = cache

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        return cached_complete(self.cache, None, req, backend=self.backend)
