"""Minimal JSON-over-HTTP client with bounded retries (stdlib only)."""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from typing import Callable, TypeVar

from agentgraph.errors import ConfigurationError, TransportError

log = logging.getLogger(__name__)

T = TypeVar("T")


def post_json(url: str, payload: dict, token: str | None = None, timeout: float = 60.0) -> dict:
    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        detail = exc.read()[:500].decode("utf-8", "replace")
        raise TransportError(
            f"HTTP {exc.code} from {url}",
            {"status": exc.code, "body": detail},
            retryable=exc.code >= 500 or exc.code == 429,
        ) from exc
    except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
        raise TransportError(f"cannot reach {url}: {exc}", {"reason": str(exc)}) from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise TransportError(
            f"non-JSON response from {url}", {"body": raw[:500].decode("utf-8", "replace")}
        ) from exc


def with_retries(
    fn: Callable[[], T],
    attempts: int = 3,
    base_delay: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    """Call ``fn`` up to ``attempts`` times, doubling the delay after each retryable failure."""
    for attempt in range(attempts):
        try:
            return fn()
        except TransportError as exc:
            if not exc.retryable or attempt == attempts - 1:
                exc.diagnostics.setdefault("attempts", attempt + 1)
                raise
            delay = base_delay * 2**attempt
            log.warning("transport error (%s); retry %d in %.1fs", exc, attempt + 1, delay)
            sleep(delay)
    raise AssertionError("unreachable")


class ChatClient:
    """Chat-completions client: POST {"model", "messages", "temperature"} and return the reply text."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        token: str | None = None,
        temperature: float = 0.7,
        timeout: float = 120.0,
        attempts: int = 3,
        base_delay: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.token = token
        self.temperature = temperature
        self.timeout = timeout
        self.attempts = attempts
        self.base_delay = base_delay
        self._sleep = sleep

    @classmethod
    def from_env(cls, temperature: float, prefix: str = "AGENTGRAPH_CHAT", **kwargs) -> ChatClient:
        """Endpoint, model and token come from ``{prefix}_URL``, ``_MODEL`` and ``_TOKEN``."""
        url = os.environ.get(f"{prefix}_URL")
        if not url:
            raise ConfigurationError(f"{prefix}_URL is not set; no chat endpoint configured")
        model = os.environ.get(f"{prefix}_MODEL", "gpt-4o-mini")
        return cls(url, model, os.environ.get(f"{prefix}_TOKEN"), temperature, **kwargs)

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}

        def once() -> str:
            reply = post_json(self.endpoint, payload, self.token, self.timeout)
            try:
                return reply["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise TransportError(
                    "malformed chat-completions reply", {"reply": str(reply)[:500]}, retryable=False
                ) from exc

        return with_retries(once, self.attempts, self.base_delay, self._sleep)
