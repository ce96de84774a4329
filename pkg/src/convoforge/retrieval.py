"""Embeddings, an exact cosine-similarity index, and centroid utilities.

The index is flat (exhaustive scan) on purpose: at the corpus scales this
pipeline targets (thousands of chunks), exact search is fast and removes
recall accuracy as a variable. Vectors are L2-normalized once at build time
so a query is a single matrix-vector product.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .errors import RetrievalError, UndefinedSimilarityError

DEFAULT_TOP_K = 3


@dataclass(frozen=True)
class RetrievedDoc:
    chunk_ref: str
    score: float


class EmbeddingBackend(Protocol):
    name: str
    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _l2_normalize(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise RetrievalError("cannot normalize a zero vector")
    return matrix / norms


class HashEmbeddingBackend:
    """Deterministic offline embeddings: seeded hash of the text expanded to
    a fixed-dim pseudo-random unit vector. Identical text always maps to the
    identical vector, which makes whole-pipeline runs reproducible."""

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("embedding dim must be >= 2")
        self.name = f"mock-hash-{dim}d"
        self.dim = dim
        self.seed = seed

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValueError("embed() requires at least one text")
        rows = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            rows[i] = rng.standard_normal(self.dim)
        return _l2_normalize(rows)


class HttpEmbeddingBackend:
    """Client for an HTTP embeddings endpoint: POST {model, input[]} returns
    {data[].embedding}. Auth is a bearer token read from an environment
    variable named in the config."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "CONVOFORGE_API_KEY",
        batch_size: int = 64,
        retries: int = 3,
        timeout: float = 60.0,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        self.name = f"http:{model}"
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.batch_size = batch_size
        self.retries = retries
        self.timeout = timeout
        self.session = session or requests.Session()
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _embed_batch(self, batch: list[str], batch_index: int) -> list[list[float]]:
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(
                    self.endpoint,
                    json={"model": self.model, "input": batch},
                    headers=self._headers(),
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                data = resp.json()["data"]
                data = sorted(data, key=lambda item: item.get("index", 0))
                return [item["embedding"] for item in data]
            except Exception as exc:  # transport, HTTP status, or malformed body
                last_error = exc
                if attempt < self.retries:
                    self._sleep((2**attempt) * (1.0 + random.random() * 0.25))
        raise RetrievalError(
            f"embedding backend failed on batch {batch_index} "
            f"({len(batch)} texts) after {self.retries + 1} attempts: {last_error}"
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValueError("embed() requires at least one text")
        vectors: list[list[float]] = []
        for b, i in enumerate(range(0, len(texts), self.batch_size)):
            vectors.extend(self._embed_batch(list(texts[i : i + self.batch_size]), b))
        return _l2_normalize(np.asarray(vectors, dtype=np.float64))


class VectorIndex:
    """Immutable exact-scan index over normalized chunk embeddings."""

    def __init__(self, ids: list[str], vectors: np.ndarray, backend: EmbeddingBackend):
        if len(ids) != vectors.shape[0]:
            raise ValueError("ids and vectors disagree on count")
        self.ids = ids
        self.vectors = vectors
        self.backend = backend

    @classmethod
    def build(cls, ids: Sequence[str], texts: Sequence[str], backend: EmbeddingBackend) -> "VectorIndex":
        if len(ids) != len(texts):
            raise ValueError("ids and texts disagree on count")
        if not ids:
            raise RetrievalError("cannot build an index over an empty chunk set; run ingestion first")
        vectors = _l2_normalize(backend.embed(texts))
        return cls(list(ids), vectors, backend)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def top_k(self, query: str, k: int = DEFAULT_TOP_K) -> list[RetrievedDoc]:
        """Return the k most cosine-similar chunks, ties broken by chunk_id."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if len(self.ids) == 0:
            raise RetrievalError("vector index is empty; run ingestion first")
        q = _l2_normalize(self.backend.embed([query]))[0]
        scores = self.vectors @ q
        order = sorted(range(len(self.ids)), key=lambda i: (-scores[i], self.ids[i]))
        return [RetrievedDoc(chunk_ref=self.ids[i], score=float(scores[i])) for i in order[:k]]

    def save(self, path: Path | str) -> Path:
        """Persist as a one-line JSON header followed by raw float64 rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "dim": self.dim,
            "count": len(self.ids),
            "normalized": True,
            "dtype": "float64-le",
            "backend": self.backend.name,
            "ids": self.ids,
        }
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
                fh.write(b"\n")
                fh.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
            os.replace(tmp, path)
        except BaseException:
            tmp.unlink(missing_ok=True)
            raise
        return path

    @classmethod
    def load(cls, path: Path | str, backend: EmbeddingBackend) -> "VectorIndex":
        path = Path(path)
        if not path.is_file():
            raise RetrievalError(f"vector file not found: {path}; run ingestion first")
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            raw = fh.read()
        count, dim = header["count"], header["dim"]
        vectors = np.frombuffer(raw, dtype="<f8").reshape(count, dim).copy()
        return cls(list(header["ids"]), vectors, backend)


def centroid_similarity(set_a: np.ndarray | Sequence[Sequence[float]],
                        set_b: np.ndarray | Sequence[Sequence[float]]) -> float:
    """Cosine of the two arithmetic-mean vectors (means re-normalized)."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("centroid_similarity requires two non-empty vector sets")
    mean_a = a.mean(axis=0)
    mean_b = b.mean(axis=0)
    norm_a = np.linalg.norm(mean_a)
    norm_b = np.linalg.norm(mean_b)
    if norm_a == 0 or norm_b == 0:
        raise UndefinedSimilarityError("a centroid has zero norm; similarity is undefined")
    return float((mean_a / norm_a) @ (mean_b / norm_b))
