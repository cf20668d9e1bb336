"""Corpus, instance and embedding ingestion, plus shared text normalization.

Every word-level operation in the toolkit (indexing, lexical metrics,
facet extraction, taxonomy counts) runs on the token stream produced by
:func:`normalize`, so this module is the single source of truth for what
counts as a word.  All loaded structures are immutable and safe to share
across worker threads.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError

__all__ = [
    "normalize",
    "stopwords",
    "Document",
    "CorpusStats",
    "Corpus",
    "ClarificationInstance",
    "EmbeddingTable",
    "load_corpus",
    "save_corpus",
    "load_instances",
    "load_embeddings",
]


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    """The bundled English stopword list (one lowercase word per line)."""
    text = resources.files("clarikit").joinpath("data/stopwords_en.txt").read_text("utf-8")
    return frozenset(w for w in text.split() if w)


# Per-character mapping cache: punctuation -> space, everything else kept.
_CHAR_MAP: dict[str, str] = {}


def _map_char(ch: str) -> str:
    mapped = _CHAR_MAP.get(ch)
    if mapped is None:
        mapped = " " if unicodedata.category(ch).startswith("P") else ch
        _CHAR_MAP[ch] = mapped
    return mapped


def normalize(text: str, drop_stopwords: bool = False) -> list[str]:
    """Lowercase, replace Unicode punctuation with separators, split on whitespace.

    With ``drop_stopwords`` the bundled English stopword list is applied
    after splitting.  Deterministic, and idempotent on its own output.
    """
    lowered = text.lower()
    tokens = "".join(_map_char(ch) for ch in lowered).split()
    if drop_stopwords:
        sw = stopwords()
        tokens = [t for t in tokens if t not in sw]
    return tokens


@dataclass(frozen=True)
class Document:
    """One retrievable text unit."""

    id: str
    text: str


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    total_token_count: int
    avg_doc_len: float


def compute_stats(docs: tuple[Document, ...]) -> CorpusStats:
    """Recompute corpus statistics from scratch (token counts per normalize)."""
    lengths = [len(normalize(d.text)) for d in docs]
    total = sum(lengths)
    avg = total / len(docs) if docs else 0.0
    return CorpusStats(doc_count=len(docs), total_token_count=total, avg_doc_len=avg)


@dataclass(frozen=True)
class Corpus:
    """An ordered, immutable document collection with precomputed stats."""

    docs: tuple[Document, ...]
    stats: CorpusStats

    @classmethod
    def from_docs(cls, docs: list[Document] | tuple[Document, ...]) -> "Corpus":
        seen: set[str] = set()
        for doc in docs:
            if not doc.id:
                raise DataError("document with empty id")
            if doc.id in seen:
                raise DataError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)
            if not doc.text.strip():
                raise DataError(f"document {doc.id!r} has empty text")
        docs = tuple(docs)
        return cls(docs=docs, stats=compute_stats(docs))

    @cached_property
    def _by_id(self) -> dict[str, Document]:
        return {d.id: d for d in self.docs}

    def doc(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise DataError(f"unknown document id {doc_id!r}") from None

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.docs)


@dataclass(frozen=True)
class ClarificationInstance:
    """A query with its ground-truth facets and optional template question."""

    id: str
    query: str
    facets: tuple[str, ...]
    question: str | None = None


@dataclass(frozen=True)
class EmbeddingTable:
    """Externally computed dense vectors keyed by document or text identifier."""

    dim: int
    entries: dict[str, np.ndarray]

    @classmethod
    def from_dict(cls, raw: dict[str, "list[float] | np.ndarray"]) -> "EmbeddingTable":
        if not raw:
            raise DataError("embedding table is empty")
        entries: dict[str, np.ndarray] = {}
        dim: int | None = None
        for key, value in raw.items():
            vec = np.asarray(value, dtype=np.float64)
            if vec.ndim != 1:
                raise DataError(f"embedding for {key!r} is not a flat vector")
            if dim is None:
                dim = int(vec.shape[0])
            if vec.shape[0] != dim:
                raise DataError(
                    f"embedding for {key!r} has {vec.shape[0]} components, expected {dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise DataError(f"embedding for {key!r} contains a non-finite value")
            entries[key] = vec
        assert dim is not None
        return cls(dim=dim, entries=entries)

    def vector(self, key: str) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise DataError(f"no embedding for key {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (1-based line number, parsed object) for every non-blank line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno}: expected a JSON object")
            yield lineno, obj


def _require_str(obj: dict, field: str, path: Path | str, lineno: int) -> str:
    if field not in obj:
        raise DataError(f"{path}: line {lineno}: missing field {field!r}")
    value = obj[field]
    if not isinstance(value, str):
        raise DataError(f"{path}: line {lineno}: field {field!r} must be a string")
    return value


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSONL corpus ({"id","text"} per line), preserving file order.

    Duplicate ids are a hard error: silently keeping one copy would corrupt
    downstream document statistics.
    """
    docs: list[Document] = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_jsonl(path):
        doc_id = _require_str(obj, "id", path, lineno)
        text = _require_str(obj, "text", path, lineno)
        if not doc_id:
            raise DataError(f"{path}: line {lineno}: empty document id")
        if doc_id in seen:
            raise DataError(
                f"{path}: line {lineno}: duplicate document id {doc_id!r} "
                f"(first seen on line {seen[doc_id]})"
            )
        if not text.strip():
            raise DataError(f"{path}: line {lineno}: document {doc_id!r} has empty text")
        seen[doc_id] = lineno
        docs.append(Document(id=doc_id, text=text))
    return Corpus.from_docs(docs)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back out as JSONL; load_corpus(save_corpus(c)) == c."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.docs:
            fh.write(json.dumps({"id": doc.id, "text": doc.text}, ensure_ascii=False) + "\n")


def load_instances(path: str | Path) -> list[ClarificationInstance]:
    """Load clarification instances from JSONL, preserving file and facet order."""
    instances: list[ClarificationInstance] = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_jsonl(path):
        inst_id = _require_str(obj, "id", path, lineno)
        query = _require_str(obj, "query", path, lineno)
        if "facets" not in obj:
            raise DataError(f"{path}: line {lineno}: missing field 'facets'")
        facets = obj["facets"]
        if not isinstance(facets, list) or not all(isinstance(f, str) for f in facets):
            raise DataError(f"{path}: line {lineno}: 'facets' must be a list of strings")
        if not facets:
            raise DataError(f"{path}: line {lineno}: instance {inst_id!r} has no facets")
        for facet in facets:
            if not normalize(facet):
                raise DataError(
                    f"{path}: line {lineno}: facet {facet!r} normalizes to nothing"
                )
        question = obj.get("question")
        if question is not None and not isinstance(question, str):
            raise DataError(f"{path}: line {lineno}: 'question' must be a string or null")
        if inst_id in seen:
            raise DataError(
                f"{path}: line {lineno}: duplicate instance id {inst_id!r} "
                f"(first seen on line {seen[inst_id]})"
            )
        seen[inst_id] = lineno
        instances.append(
            ClarificationInstance(id=inst_id, query=query, facets=tuple(facets), question=question)
        )
    return instances


def load_embeddings(path: str | Path) -> EmbeddingTable:
    """Load an embedding table from JSONL ({"id","vector"} per line).

    The dimensionality is fixed by the first line; later lines must agree.
    """
    entries: dict[str, np.ndarray] = {}
    dim: int | None = None
    for lineno, obj in _iter_jsonl(path):
        key = _require_str(obj, "id", path, lineno)
        if "vector" not in obj:
            raise DataError(f"{path}: line {lineno}: missing field 'vector'")
        raw = obj["vector"]
        if not isinstance(raw, list) or not all(isinstance(x, (int, float)) for x in raw):
            raise DataError(f"{path}: line {lineno}: 'vector' must be a list of numbers")
        vec = np.asarray(raw, dtype=np.float64)
        if dim is None:
            if vec.shape[0] == 0:
                raise DataError(f"{path}: line {lineno}: empty vector")
            dim = int(vec.shape[0])
        if vec.shape[0] != dim:
            raise DataError(
                f"{path}: line {lineno}: vector has {vec.shape[0]} components, expected {dim}"
            )
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: line {lineno}: vector contains a non-finite value")
        if key in entries:
            raise DataError(f"{path}: line {lineno}: duplicate embedding id {key!r}")
        entries[key] = vec
    if dim is None:
        raise DataError(f"{path}: no embeddings found")
    return EmbeddingTable(dim=dim, entries=entries)
