"""Text embeddings with an on-disk cache, and record featurization."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ingest import EnrichedRecord
from .llm import EndpointUnreachable, LlmError

logger = logging.getLogger(__name__)

DESC_ONLY = "desc"
DESC_PLUS_CWE = "desc+cwe"
MODES = (DESC_ONLY, DESC_PLUS_CWE)
CWE_SEGMENTS = ("cwe_description", "cwe_consequences", "cwe_mitigations")
CWE_FIELDS = {"cwe_description": "description", "cwe_consequences": "common_consequences",
              "cwe_mitigations": "potential_mitigations"}


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray
    model_name: str

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionMismatch(f"embedding matrix must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding matrix contains non-finite values")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def text_key(model_name: str, text: str) -> str:
    return hashlib.sha256(f"{model_name}\x00{text}".encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Append-only JSONL cache of embedding rows keyed by (model, text hash)."""

    def __init__(self, cache_dir, model_name: str):
        self.model_name = model_name
        slug = re.sub(r"[^A-Za-z0-9._-]+", "_", model_name)
        self.path = Path(cache_dir) / f"embeddings-{slug}.jsonl"
        self._rows: dict[str, list[float]] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._rows[row["key"]] = row["embedding"]

    def __contains__(self, key):
        return key in self._rows

    def __len__(self):
        return len(self._rows)

    def get(self, key):
        return self._rows.get(key)

    def put_many(self, items: dict[str, list[float]]) -> None:
        with self._lock:
            new = {k: v for k, v in items.items() if k not in self._rows}
            if not new:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                for key, vec in new.items():
                    fh.write(json.dumps({"key": key, "embedding": vec}) + "\n")
            self._rows.update(new)


class EmbeddingClient:
    """Client for OpenAI-compatible ``/v1/embeddings`` endpoints.

    Rows already in the cache never hit the network; identical texts within
    one call are sent once.
    """

    def __init__(self, base_url: str, model: str, cache_dir=None, api_key: str | None = None,
                 batch_size: int = 64, timeout: float = 120.0):
        base = base_url.rstrip("/")
        self.url = base if base.endswith("/embeddings") else base + "/embeddings"
        self.model = model
        self.batch_size = batch_size
        self.cache = EmbeddingCache(cache_dir, model) if cache_dir is not None else None
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers)
        self.n_requests = 0
        self.dim_: int | None = None

    @classmethod
    def from_env(cls, base_url, model, api_key_env=None, **kwargs):
        key = os.environ.get(api_key_env) if api_key_env else None
        return cls(base_url, model, api_key=key, **kwargs)

    def close(self):
        self._http.close()

    def _fetch(self, texts: list[str]) -> list[list[float]]:
        try:
            resp = self._http.post(self.url, json={"model": self.model, "input": texts})
        except httpx.TransportError as exc:
            raise EndpointUnreachable(f"{self.url}: {exc!r}") from exc
        self.n_requests += 1
        if resp.status_code >= 400:
            raise LlmError(f"{self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
            rows = [list(map(float, d["embedding"])) for d in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise LlmError(f"unexpected embeddings response: {resp.text[:200]!r}") from exc
        if len(rows) != len(texts):
            raise LlmError(f"asked for {len(texts)} embeddings, got {len(rows)}")
        return rows

    def _check_dim(self, dim: int) -> None:
        if self.dim_ is None:
            self.dim_ = dim
        elif dim != self.dim_:
            raise DimensionMismatch(f"{self.model}: got dim {dim}, expected {self.dim_}")

    def embed(self, texts) -> EmbeddingMatrix:
        texts = list(texts)
        keys = [text_key(self.model, t) for t in texts]
        found: dict[str, list[float]] = {}
        if self.cache is not None:
            for k in keys:
                row = self.cache.get(k)
                if row is not None:
                    found[k] = row
        todo = list(dict.fromkeys(t for t, k in zip(texts, keys) if k not in found))
        for start in range(0, len(todo), self.batch_size):
            batch = todo[start:start + self.batch_size]
            rows = self._fetch(batch)
            fetched = {text_key(self.model, t): r for t, r in zip(batch, rows)}
            for r in rows:
                self._check_dim(len(r))
            found.update(fetched)
            if self.cache is not None:
                self.cache.put_many(fetched)
        for row in found.values():
            self._check_dim(len(row))
        if not texts:
            return EmbeddingMatrix(np.zeros((0, self.dim_ or 0)), self.model)
        return EmbeddingMatrix(np.array([found[k] for k in keys], dtype=float), self.model)


def embed_texts(endpoint_url: str, model_name: str, texts, cache_dir=None) -> EmbeddingMatrix:
    client = EmbeddingClient(endpoint_url, model_name, cache_dir=cache_dir)
    try:
        return client.embed(texts)
    finally:
        client.close()


# --------------------------------------------------------------------------
# Features


def cwe_field_text(record: EnrichedRecord, segment: str) -> str:
    """Join one CWE field across all resolved weaknesses with blank lines."""
    attr = CWE_FIELDS[segment]
    return "\n\n".join(getattr(e, attr) for e in record.cwe_texts if getattr(e, attr))


@dataclass(frozen=True)
class FeatureLayout:
    segments: tuple[tuple[str, int, int], ...]  # (name, offset, dim)

    @property
    def size(self) -> int:
        return sum(dim for _, _, dim in self.segments)

    @classmethod
    def for_mode(cls, mode: str, dim: int) -> "FeatureLayout":
        names = ("description",) + (CWE_SEGMENTS if mode == DESC_PLUS_CWE else ())
        return cls(tuple((name, i * dim, dim) for i, name in enumerate(names)))

    def to_json(self) -> list:
        return [{"name": n, "offset": o, "dim": d} for n, o, d in self.segments]

    @classmethod
    def from_json(cls, rows) -> "FeatureLayout":
        return cls(tuple((r["name"], r["offset"], r["dim"]) for r in rows))


def build_feature_matrix(records, mode: str, embedder) -> tuple[np.ndarray, FeatureLayout]:
    """Embed records into one row each; empty CWE fields give all-zero segments."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    records = list(records)
    desc = embedder.embed([r.record.description for r in records]).values
    dim = desc.shape[1] if desc.size else (embedder.dim_ or 0)
    parts = [desc.reshape(len(records), dim)]
    if mode == DESC_PLUS_CWE:
        for segment in CWE_SEGMENTS:
            texts = [cwe_field_text(r, segment) for r in records]
            block = np.zeros((len(records), dim))
            present = [i for i, t in enumerate(texts) if t]
            if present:
                block[present] = embedder.embed([texts[i] for i in present]).values
            parts.append(block)
    return np.hstack(parts), FeatureLayout.for_mode(mode, dim)


def build_features(record: EnrichedRecord, mode: str, embedder) -> np.ndarray:
    X, _ = build_feature_matrix([record], mode, embedder)
    return X[0]


class RecordFeaturizer(TransformerMixin, BaseEstimator):
    """Turn :class:`EnrichedRecord` objects into embedding feature rows.

    ``mode`` is ``"desc"`` (description only) or ``"desc+cwe"`` (description
    followed by the CWE description, consequences and mitigations segments).
    """

    def __init__(self, embedder=None, mode: str = DESC_ONLY):
        self.embedder = embedder
        self.mode = mode

    def fit(self, X, y=None):
        _, self.layout_ = build_feature_matrix(list(X)[:1], self.mode, self.embedder)
        self.n_features_out_ = self.layout_.size
        return self

    def transform(self, X):
        check_is_fitted(self, "layout_")
        features, layout = build_feature_matrix(X, self.mode, self.embedder)
        if layout != self.layout_:
            raise DimensionMismatch(f"feature layout changed: {layout} != {self.layout_}")
        return features
