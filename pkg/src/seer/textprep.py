"""Question normalization, embedding access, cosine similarity, retrieval.

Embedding provenance is pluggable: a file-backed store (JSON-lines of
{key, vector}), a remote embedding service, or the built-in deterministic
hashing encoder, which lets the whole pipeline run with no external
dependencies.
"""

from __future__ import annotations

import hashlib
import json
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Dataset, Instance

HASHING_DIM = 256

# span = (start, end, label); label in {date, number, location, company}
EntityTagger = Callable[[str], List[Tuple[int, int, str]]]

_TAG_LABELS = ("date", "number", "location", "company")


class TextPrepError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedQuestion:
    text: str


_MONTHS = (
    "january|february|march|april|may|june|july|august|september|october|november|december"
)
_DATE_RE = re.compile(
    rf"\b(?:{_MONTHS})\b(?:\s+\d{{1,2}}(?:st|nd|rd|th)?(?:,?\s+\d{{4}})?|,?\s+\d{{4}})"
    r"|\b(?:19|20)\d{2}\b",
    re.IGNORECASE,
)
_NUMBER_RE = re.compile(r"\$ ?-?\d[\d,]*(?:\.\d+)?(?: ?%)?|-?\b\d[\d,]*(?:\.\d+)?(?: ?%)?")


def regex_tagger(text: str) -> List[Tuple[int, int, str]]:
    """Default entity tagger: years and month-name dates, then numeric
    literals (with optional $, %, thousands commas).  Location and company
    tagging needs an external NER service and is a no-op here."""
    spans: List[Tuple[int, int, str]] = []
    taken = [False] * len(text)

    def claim(match: re.Match, label: str) -> None:
        start, end = match.span()
        if any(taken[start:end]):
            return
        for i in range(start, end):
            taken[i] = True
        spans.append((start, end, label))

    for match in _DATE_RE.finditer(text):
        claim(match, "date")
    for match in _NUMBER_RE.finditer(text):
        claim(match, "number")
    return sorted(spans)


_KEEP_CHARS = set(string.ascii_lowercase + string.digits + " []")


def normalize_question(question: str, tagger: Optional[EntityTagger] = None) -> NormalizedQuestion:
    """Lowercase, strip punctuation, and replace date/number/location/company
    mentions with "[date]"/"[number]"/"[location]"/"[company]" tokens.

    Tagging runs on the cased text before lowercasing and punctuation
    stripping (cased input helps recognition); tag tokens survive both.
    """
    tagger = tagger or regex_tagger
    try:
        spans = tagger(question)
    except Exception as exc:
        raise TextPrepError(f"entity tagger failed: {exc}") from exc
    pieces = []
    cursor = 0
    for start, end, label in sorted(spans):
        if label not in _TAG_LABELS or start < cursor:
            continue
        pieces.append(question[cursor:start])
        pieces.append(f"[{label}]")
        cursor = end
    pieces.append(question[cursor:])
    text = "".join(pieces).lower()
    text = "".join(ch if ch in _KEEP_CHARS else " " for ch in text)
    return NormalizedQuestion(" ".join(text.split()))


# --- embeddings --------------------------------------------------------------


class EmbeddingStore:
    """Immutable map from key strings to fixed-dimension vectors."""

    def __init__(self, dim: int):
        if dim < 1:
            raise TextPrepError("embedding dimension must be positive")
        self.dim = dim
        self._entries: Dict[str, np.ndarray] = {}

    def add(self, key: str, vector: Sequence[float]) -> None:
        arr = np.asarray(vector, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != self.dim:
            raise TextPrepError(
                f"vector for {key!r} has dimension {arr.shape}, store expects {self.dim}"
            )
        if not np.any(arr):
            raise TextPrepError(f"all-zero vector rejected for key {key!r}")
        self._entries[key] = arr

    def get(self, key: str) -> np.ndarray:
        try:
            return self._entries[key]
        except KeyError:
            raise KeyError(f"no embedding for key {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> Iterable[str]:
        return self._entries.keys()

    @classmethod
    def from_jsonl(cls, path) -> "EmbeddingStore":
        path = Path(path)
        store: Optional[EmbeddingStore] = None
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                vector = record["vector"]
                if store is None:
                    store = cls(dim=len(vector))
                store.add(record["key"], vector)
        if store is None:
            raise TextPrepError(f"embedding file {path} is empty")
        return store

    def to_jsonl(self, path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for key in sorted(self._entries):
                record = {"key": key, "vector": [float(v) for v in self._entries[key]]}
                fh.write(json.dumps(record, sort_keys=True))
                fh.write("\n")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise TextPrepError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        raise TextPrepError("cosine similarity undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def nearest_neighbors(
    test_key: str, pool: Sequence[str], store: EmbeddingStore, k: int
) -> List[Tuple[str, float]]:
    """Top-min(k, |pool|) pool keys by cosine similarity to the test key,
    ties broken by key string ascending."""
    if k < 1:
        raise TextPrepError("k must be positive")
    query = store.get(test_key)
    scored = [(key, cosine_similarity(query, store.get(key))) for key in pool]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[: min(k, len(scored))]


def question_key(inst_id: str) -> str:
    return inst_id


def paragraph_key(inst_id: str, index: int) -> str:
    return f"{inst_id}::p{index}"


def retrieve_paragraphs(inst: Instance, store: EmbeddingStore, k: int) -> List[int]:
    """Indices of the top-min(k, count) paragraphs by similarity to the
    question, in original document order."""
    if k < 1:
        raise TextPrepError("k must be positive")
    count = len(inst.paragraphs)
    if count == 0:
        return []
    query = store.get(question_key(inst.id))
    scored = []
    for idx in range(count):
        sim = cosine_similarity(query, store.get(paragraph_key(inst.id, idx)))
        scored.append((idx, sim))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    keep = {idx for idx, _ in scored[: min(k, count)]}
    return [idx for idx in range(count) if idx in keep]


# --- hashing encoder ---------------------------------------------------------


def _token_slot(token: str, dim: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dim


def hashing_encode(text: str, dim: int = HASHING_DIM) -> np.ndarray:
    """Deterministic token-hash bag-of-words embedding, L2-normalized.

    Empty input hashes a sentinel token so the vector is never all-zero.
    """
    tokens = text.split() or ["[empty]"]
    vector = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        vector[_token_slot(token, dim)] += 1.0
    return vector / np.linalg.norm(vector)


def build_hashing_store(
    datasets: Sequence[Dataset],
    dim: int = HASHING_DIM,
    tagger: Optional[EntityTagger] = None,
    include_paragraphs: bool = True,
) -> EmbeddingStore:
    """Embed normalized questions (and optionally raw paragraphs) of the
    given datasets with the hashing encoder."""
    store = EmbeddingStore(dim)
    for dataset in datasets:
        for inst in dataset:
            normalized = normalize_question(inst.question, tagger).text
            store.add(question_key(inst.id), hashing_encode(normalized, dim))
            if include_paragraphs:
                for idx, paragraph in enumerate(inst.paragraphs):
                    store.add(paragraph_key(inst.id, idx), hashing_encode(paragraph, dim))
    return store
