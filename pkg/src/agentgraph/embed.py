"""Text embeddings and the task encoder that maps a query embedding to the task vector z."""

from __future__ import annotations

import hashlib
import os
import re
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from agentgraph.errors import ConfigurationError, InputError, TransportError
from agentgraph.http import post_json, with_retries
from agentgraph.numeric import Tensor, add, matmul, relu

EMBED_DIM = 384
D_TASK = 128

_SPLIT = re.compile(r"[^a-z0-9]+")


@dataclass(frozen=True)
class RawEmbedding:
    vector: np.ndarray
    source: str  # "hash-fallback" | "external-provider"

    def __post_init__(self):
        if self.vector.shape != (EMBED_DIM,):
            raise InputError(f"embedding must have length {EMBED_DIM}, got {self.vector.shape}")


class EmbeddingProvider(Protocol):
    source: str

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


def token_bucket(token: str, dim: int = EMBED_DIM) -> tuple[int, float]:
    """Bucket and sign for one token, from a BLAKE2b-64 digest.

    bucket = digest mod dim; sign = +1 if bit 63 of the digest is clear, else -1.
    """
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return h % dim, (1.0 if (h >> 63) == 0 else -1.0)


class HashEmbedder:
    """Offline, deterministic signed feature hashing, L2-normalised."""

    source = "hash-fallback"

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise InputError(f"text has no alphanumeric tokens: {text!r}")
        vec = np.zeros(self.dim)
        for tok in tokens:
            bucket, sign = token_bucket(tok, self.dim)
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # every token cancelled out; fall back to the unsigned histogram
            for tok in tokens:
                vec[token_bucket(tok, self.dim)[0]] += 1.0
            norm = np.linalg.norm(vec)
        return vec / norm

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


class HttpEmbeddingProvider:
    """Remote embedding service: POST {"input": [...], "dim": 384} -> {"embeddings": [[...]]}."""

    source = "external-provider"

    def __init__(self, endpoint: str, token: str | None = None, timeout: float = 30.0, attempts: int = 3):
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.attempts = attempts

    @classmethod
    def from_env(cls) -> HttpEmbeddingProvider:
        endpoint = os.environ.get("AGENTGRAPH_EMBED_URL")
        if not endpoint:
            raise ConfigurationError("AGENTGRAPH_EMBED_URL is not set")
        return cls(endpoint, os.environ.get("AGENTGRAPH_EMBED_TOKEN"))

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        payload = {"input": list(texts), "dim": EMBED_DIM}
        reply = with_retries(
            lambda: post_json(self.endpoint, payload, self.token, self.timeout), self.attempts
        )
        try:
            arr = np.asarray(reply["embeddings"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError("malformed embedding response", {"response": str(reply)[:500]}, False) from exc
        if arr.shape != (len(texts), EMBED_DIM):
            raise TransportError(
                f"expected {len(texts)}x{EMBED_DIM} embeddings, got {arr.shape}", {}, retryable=False
            )
        return arr


class FallbackProvider:
    """Try ``primary``; on a transport error use ``fallback`` for the same batch."""

    def __init__(self, primary: EmbeddingProvider, fallback: EmbeddingProvider | None = None):
        self.primary = primary
        self.fallback = fallback or HashEmbedder()
        self.source = primary.source
        self.last_error: TransportError | None = None

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        try:
            self.source = self.primary.source
            return self.primary.embed_many(texts)
        except TransportError as exc:
            self.last_error = exc
            self.source = self.fallback.source
            return self.fallback.embed_many(texts)


def embed_text(text: str, provider: EmbeddingProvider | None = None) -> RawEmbedding:
    if not text or not text.strip():
        raise InputError("cannot embed empty text")
    provider = provider or HashEmbedder()
    vec = provider.embed_many([text])[0]
    return RawEmbedding(np.asarray(vec, dtype=np.float64), provider.source)


class RoleEmbeddingCache:
    """Role-description embeddings, computed once per exact string."""

    def __init__(self, provider: EmbeddingProvider | None = None):
        self.provider = provider or HashEmbedder()
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def get(self, role: str) -> np.ndarray:
        with self._lock:
            if role not in self._cache:
                self._cache[role] = embed_text(role, self.provider).vector
            return self._cache[role]

    def table(self, roles: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(r) for r in roles])


def encode_task(e, params: dict[str, Tensor]) -> Tensor:
    """z = relu(e W1 + b1) W2 + b2 for a single embedding (1 x d_task) or a batch (B x d_task)."""
    x = e.vector if isinstance(e, RawEmbedding) else e
    if not isinstance(x, Tensor):
        x = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    w1, b1, w2, b2 = (params[k] for k in ("task.w1", "task.b1", "task.w2", "task.b2"))
    if x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ConfigurationError(
            f"task encoder shapes do not chain: input {x.shape}, w1 {w1.shape}, w2 {w2.shape}"
        )
    hidden = relu(add(matmul(x, w1), b1))
    return add(matmul(hidden, w2), b2)


def zero_task_vector(d_task: int = D_TASK) -> np.ndarray:
    return np.zeros(d_task)
