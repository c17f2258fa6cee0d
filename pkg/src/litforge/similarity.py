"""Sentence similarity scorers feeding the aligner.

A score matrix is a 2-D float64 ``numpy`` array with one row per sentence of
sequence A and one column per sentence of sequence B, values in [0, 1].
"""

from __future__ import annotations

import hashlib
import math
import os
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx
import numpy as np

from .service import (ProtocolError, RetryPolicy, ServiceError, TransientServiceError,
                      call_with_retry, classify_status)

ScoreMatrix = np.ndarray


class SimilarityScorer(Protocol):
    def score(self, a: str, b: str) -> float: ...

    def score_matrix(self, seq_a: Sequence[str], seq_b: Sequence[str]) -> ScoreMatrix: ...


def trigram_counts(text: str) -> Counter:
    text = text.lower()
    if len(text) < 3:
        # Too short for a trigram: the whole string is its only gram.
        return Counter([text]) if text else Counter()
    return Counter(text[i:i + 3] for i in range(len(text) - 2))


def _cosine(ca: Counter, cb: Counter) -> float:
    if not ca and not cb:
        return 1.0
    if not ca or not cb:
        return 0.0
    if len(cb) < len(ca):
        ca, cb = cb, ca
    dot = math.fsum(v * cb[k] for k, v in ca.items() if k in cb)
    na = math.fsum(v * v for v in ca.values())
    nb = math.fsum(v * v for v in cb.values())
    if ca == cb:
        return 1.0
    return min(1.0, max(0.0, dot / math.sqrt(na * nb)))


def lexical_sim(a: str, b: str) -> float:
    """Cosine of lowercased character-trigram count vectors."""
    return _cosine(trigram_counts(a), trigram_counts(b))


class LexicalScorer:
    """Offline default scorer; caches trigram vectors per distinct string."""

    def __init__(self):
        self._cache: dict[str, Counter] = {}

    def _vec(self, text: str) -> Counter:
        vec = self._cache.get(text)
        if vec is None:
            vec = self._cache[text] = trigram_counts(text)
        return vec

    def score(self, a: str, b: str) -> float:
        return _cosine(self._vec(a), self._vec(b))

    def score_matrix(self, seq_a: Sequence[str], seq_b: Sequence[str]) -> ScoreMatrix:
        va = [self._vec(a) for a in seq_a]
        vb = [self._vec(b) for b in seq_b]
        return np.array([[_cosine(x, y) for y in vb] for x in va], dtype=np.float64).reshape(len(va), len(vb))


def score_matrix(seq_a: Sequence[str], seq_b: Sequence[str], scorer: SimilarityScorer) -> ScoreMatrix:
    if not seq_a or not seq_b:
        raise ValueError("both sequences must be non-empty")
    batch = getattr(scorer, "score_matrix", None)
    if batch is not None:
        m = np.asarray(batch(list(seq_a), list(seq_b)), dtype=np.float64)
    else:
        m = np.array([[scorer.score(a, b) for b in seq_b] for a in seq_a], dtype=np.float64)
    if m.shape != (len(seq_a), len(seq_b)):
        raise ValueError(f"scorer returned shape {m.shape}, expected {(len(seq_a), len(seq_b))}")
    return m


# -- remote embedding service -------------------------------------------------

@dataclass(frozen=True)
class EmbeddingEndpoint:
    url: str
    token_env: str = "LITFORGE_EMBED_TOKEN"
    batch_size: int = 64
    concurrency: int = 4
    timeout: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)


def content_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingClient:
    """Client for a ``{"texts": [...]} -> {"vectors": [[...], ...]}`` service.

    Vectors are unit-normalized and cached by content hash, so a sentence is
    only ever sent once per client. Failures are never papered over with
    lexical scores: after the retry budget the call raises ``ServiceError``.
    """

    def __init__(self, endpoint: EmbeddingEndpoint, http: httpx.Client | None = None, sleep=None):
        self.endpoint = endpoint
        token = os.environ.get(endpoint.token_env)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.http = http or httpx.Client(timeout=endpoint.timeout)
        self.headers = headers
        self.requests = 0
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._sleep = sleep

    def _post(self, texts: list[str]) -> np.ndarray:
        with self._lock:
            self.requests += 1
        try:
            resp = self.http.post(self.endpoint.url, json={"texts": texts}, headers=self.headers)
        except httpx.TransportError as exc:
            raise TransientServiceError(f"network error: {exc}") from exc
        if resp.status_code != 200:
            raise classify_status(resp.status_code, resp.text)
        try:
            vectors = resp.json()["vectors"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc}") from exc
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            got = len(vectors) if isinstance(vectors, list) else type(vectors).__name__
            raise ProtocolError(f"expected {len(texts)} vectors, got {got}")
        try:
            arr = np.asarray(vectors, dtype=np.float64)
        except ValueError as exc:
            raise ProtocolError(f"ragged or non-numeric vectors: {exc}") from exc
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ProtocolError("vectors must be a finite 2-D array")
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ProtocolError("zero-length embedding vector")
        return arr / norms

    def _fetch(self, texts: list[str]) -> np.ndarray:
        kwargs = {"sleep": self._sleep} if self._sleep else {}
        result, _ = call_with_retry(lambda: self._post(texts), self.endpoint.retry, **kwargs)
        return result

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        keys = [content_key(t) for t in texts]
        missing: dict[str, str] = {}
        for k, t in zip(keys, texts):
            if k not in self._cache and k not in missing:
                missing[k] = t
        todo = list(missing.items())
        size = self.endpoint.batch_size
        batches = [todo[i:i + size] for i in range(0, len(todo), size)]
        if batches:
            with ThreadPoolExecutor(max_workers=max(1, self.endpoint.concurrency)) as pool:
                results = list(pool.map(lambda b: self._fetch([t for _, t in b]), batches))
            for batch, vecs in zip(batches, results):
                for (k, _), v in zip(batch, vecs):
                    self._cache[k] = v
        return np.stack([self._cache[k] for k in keys]) if keys else np.zeros((0, 0))


def remote_sim_matrix(seq_a: Sequence[str], seq_b: Sequence[str], client: EmbeddingClient) -> ScoreMatrix:
    """Cosine similarity of service embeddings rescaled from [-1, 1] to [0, 1]."""
    ea = client.embed(seq_a)
    eb = client.embed(seq_b)
    cos = np.clip(ea @ eb.T, -1.0, 1.0)
    return (cos + 1.0) / 2.0


class RemoteScorer:
    def __init__(self, client: EmbeddingClient):
        self.client = client

    def score(self, a: str, b: str) -> float:
        return float(remote_sim_matrix([a], [b], self.client)[0, 0])

    def score_matrix(self, seq_a: Sequence[str], seq_b: Sequence[str]) -> ScoreMatrix:
        return remote_sim_matrix(seq_a, seq_b, self.client)


__all__ = [
    "EmbeddingClient", "EmbeddingEndpoint", "LexicalScorer", "ProtocolError", "RemoteScorer",
    "ScoreMatrix", "ServiceError", "SimilarityScorer", "lexical_sim", "remote_sim_matrix",
    "score_matrix", "trigram_counts",
]
