"""Embedding-based retrieval of supported evidence items for a new question."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .bank import EvidenceBank, GroupKey, ItemEvidence, SurveyItem

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_N_MIN = 30
TEXT_SEPARATOR = "\n"


class SimilarityError(ValueError):
    """Cosine similarity is undefined (zero vector or dimension mismatch)."""


class TransportError(RuntimeError):
    """A remote encoder or LLM endpoint failed after all retries."""


class UnknownGroupError(KeyError):
    pass


def item_text(item: SurveyItem) -> str:
    if item.instruction:
        return item.question_text + TEXT_SEPARATOR + item.instruction
    return item.question_text


def question_text(text: str, instruction: str | None = None) -> str:
    return text + TEXT_SEPARATOR + instruction if instruction else text


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    a = np.asarray(u, dtype=float)
    b = np.asarray(v, dtype=float)
    if a.shape != b.shape:
        raise SimilarityError(f"dimension mismatch {a.shape} vs {b.shape}")
    sa, sb = np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0)
    if sa == 0.0 or sb == 0.0:
        raise SimilarityError("cosine similarity undefined for a zero vector")
    # rescale first so tiny or huge components don't under/overflow the norms
    a, b = a / sa, b / sb
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(min(1.0, max(-1.0, np.dot(a, b) / (na * nb))))


# --- encoders --------------------------------------------------------------


class Encoder(Protocol):
    identity: str

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEncoder:
    """Deterministic seeded feature-hashing encoder for offline use and tests.

    Words and character trigrams are hashed into ``dim`` signed buckets, so
    texts sharing vocabulary land close together in cosine space.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.identity = f"hashing-v1:dim={dim}:seed={seed}"

    def _features(self, text: str) -> list[str]:
        words = _TOKEN_RE.findall(text.lower())
        feats = [f"w:{w}" for w in words]
        for w in words:
            padded = f"#{w}#"
            feats.extend(f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2))
        return feats or ["<empty>"]

    def _embed_one(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        key = self.seed.to_bytes(8, "little", signed=True)
        for feat in self._features(text):
            h = hashlib.blake2b(feat.encode("utf-8"), digest_size=8, key=key).digest()
            bucket = int.from_bytes(h[:4], "little") % self.dim
            sign = 1.0 if h[4] & 1 else -1.0
            vec[bucket] += sign
        if not any(vec):
            # signed collisions cancelled everything out
            vec[0] = 1.0
        return vec

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [self._embed_one(t) for t in texts]


class HTTPEncoder:
    """Remote encoder: ``POST {"texts": [...]}`` -> ``{"embeddings": [[...], ...]}``."""

    def __init__(
        self,
        url: str,
        model: str = "",
        token_env: str = "EVIDA_ENCODER_TOKEN",
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url
        self.identity = f"http:{url}:{model}"
        self.model = model
        self.token_env = token_env
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body: dict = {"texts": list(texts)}
        if self.model:
            body["model"] = self.model
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
                resp.raise_for_status()
                embeddings = resp.json()["embeddings"]
                if len(embeddings) != len(texts):
                    raise ValueError(f"expected {len(texts)} embeddings, got {len(embeddings)}")
                return [[float(x) for x in e] for e in embeddings]
            except (httpx.HTTPError, KeyError, TypeError, ValueError) as e:
                last = e
                logger.warning("encoder request failed (attempt %d/%d): %s", attempt + 1, self.retries, e)
        raise TransportError(f"encoder {self.url} failed after {self.retries} attempts: {last}")


class CachedEncoder:
    """Content-addressed on-disk embedding cache in front of another encoder."""

    def __init__(self, inner: Encoder, cache_dir: str | Path):
        self.inner = inner
        self.identity = inner.identity
        ns = hashlib.sha256(inner.identity.encode("utf-8")).hexdigest()[:16]
        self.root = Path(cache_dir) / ns
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _path(self, text: str) -> Path:
        return self.root / (hashlib.sha256(text.encode("utf-8")).hexdigest() + ".json")

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out: list[list[float] | None] = [None] * len(texts)
        todo = []
        for i, t in enumerate(texts):
            p = self._path(t)
            if p.exists():
                out[i] = json.loads(p.read_text())
                self.hits += 1
            else:
                todo.append(i)
        if todo:
            self.misses += len(todo)
            fresh = self.inner.embed([texts[i] for i in todo])
            for i, vec in zip(todo, fresh):
                tmp = self._path(texts[i]).with_suffix(f".tmp{threading.get_ident()}")
                tmp.write_text(json.dumps(vec))
                tmp.replace(self._path(texts[i]))
                out[i] = vec
        return out  # type: ignore[return-value]


# --- retrieval -------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalQuery:
    question_text: str
    group: GroupKey
    instruction: str | None = None
    k: int = DEFAULT_K
    n_min: int = DEFAULT_N_MIN
    exclude_item_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_min < 0:
            raise ValueError("n_min must be >= 0")
        object.__setattr__(self, "exclude_item_ids", frozenset(self.exclude_item_ids))


@dataclass(frozen=True)
class RetrievedEntry:
    item_id: str
    score: float
    evidence: ItemEvidence


@dataclass(frozen=True)
class RetrievedEvidence:
    entries: tuple[RetrievedEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.entries]

    def summary(self) -> list[dict]:
        return [
            {"item_id": e.item_id, "score": round(e.score, 6), "support": e.evidence.support}
            for e in self.entries
        ]


@dataclass
class EvidenceIndex:
    """Bank items embedded once; queries score against the cached vectors."""

    bank: EvidenceBank
    encoder: Encoder
    max_workers: int = 4
    batch_size: int = 32
    _vectors: dict[str, np.ndarray] = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def build(self) -> "EvidenceIndex":
        texts: dict[str, str] = {}
        for ge in self.bank.groups.values():
            for item_id, ev in ge.items.items():
                texts.setdefault(item_id, item_text(ev.item))
        ids = sorted(i for i in texts if i not in self._vectors)
        batches = [ids[i:i + self.batch_size] for i in range(0, len(ids), self.batch_size)]

        def run(batch: list[str]) -> list[list[float]]:
            return self.encoder.embed([texts[i] for i in batch])

        if len(batches) > 1 and self.max_workers > 1:
            with ThreadPoolExecutor(self.max_workers) as pool:
                results = list(pool.map(run, batches))
        else:
            results = [run(b) for b in batches]
        with self._lock:
            for batch, vecs in zip(batches, results):
                for item_id, vec in zip(batch, vecs):
                    self._vectors[item_id] = np.asarray(vec, dtype=float)
        return self

    def vector(self, item_id: str) -> np.ndarray:
        if item_id not in self._vectors:
            self.build()
        return self._vectors[item_id]

    def retrieve(self, query: RetrievalQuery) -> RetrievedEvidence:
        ge = self.bank.group(query.group)
        if ge is None:
            raise UnknownGroupError(query.group.label())
        candidates = [i for i in sorted(ge.items) if i not in query.exclude_item_ids]
        if not candidates:
            logger.warning("group %s has no candidate items", query.group.label())
            return RetrievedEvidence()

        qvec = self.encoder.embed([question_text(query.question_text, query.instruction)])[0]
        scored = [(cosine(self.vector(i), qvec), i) for i in candidates]
        scored.sort(key=lambda t: (-t[0], t[1]))
        # truncate first, then filter: low-support items inside top-k are dropped, never backfilled
        top = scored[: query.k]
        entries = tuple(
            RetrievedEntry(item_id, score, ge.items[item_id])
            for score, item_id in top
            if ge.items[item_id].support >= query.n_min
        )
        return RetrievedEvidence(entries)


def retrieve(query: RetrievalQuery, bank: EvidenceBank, encoder: Encoder) -> RetrievedEvidence:
    return EvidenceIndex(bank, encoder).retrieve(query)
