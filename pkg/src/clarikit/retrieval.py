"""Evidence-pool construction: lexical and dense retrieval, interleaving, MMR.

Pools are built per clarification instance in one of four alignment modes:

* query_only     - one retrieval round with the raw query
* facet_aligned  - one round per sub-query (the query, then the query
                   expanded with each ground-truth facet), round-robin
                   interleaved without back-filling duplicates
* oracle         - the ground-truth facets themselves as synthetic documents
* closed_book    - an empty pool

Everything here is deterministic: ranking ties break on ascending document
id, interleaving preserves within-list order, and MMR ties break on the
candidate's original rank.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Hashable, Sequence, TypeVar

import numpy as np

from .corpus import ClarificationInstance, Corpus, EmbeddingTable, normalize
from .errors import DataError

__all__ = [
    "InvertedIndex",
    "ScoredDoc",
    "PoolEntry",
    "EvidencePool",
    "RetrievalConfig",
    "build_inverted_index",
    "bm25_retrieve",
    "dense_retrieve",
    "interleave_round_robin",
    "build_pool",
    "mmr_rerank",
    "embedding_similarity",
    "tfidf_similarity",
    "entry_text",
    "resolve_texts",
    "save_index",
    "load_index",
    "write_pools",
    "read_pools",
    "ORACLE_ID_PREFIX",
]

T = TypeVar("T")

ORACLE_ID_PREFIX = "oracle:"

QUERY_LABEL = "Q"


def facet_label(facet_index: int) -> str:
    """Provenance label for the 0-based facet index: F1, F2, ..."""
    return f"F{facet_index + 1}"


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class InvertedIndex:
    """Term postings over a corpus, tokenized with the shared normalizer."""

    postings: dict[str, tuple[tuple[int, int], ...]]  # term -> ((ordinal, tf), ...)
    doc_lengths: tuple[int, ...]
    doc_ids: tuple[str, ...]
    avg_doc_len: float

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @cached_property
    def ordinal_of(self) -> dict[str, int]:
        return {doc_id: i for i, doc_id in enumerate(self.doc_ids)}


def build_inverted_index(corpus: Corpus) -> InvertedIndex:
    if len(corpus) == 0:
        raise DataError("cannot index an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths: list[int] = []
    for ordinal, doc in enumerate(corpus.docs):
        tokens = normalize(doc.text)
        lengths.append(len(tokens))
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((ordinal, tf))
    return InvertedIndex(
        postings={t: tuple(pl) for t, pl in postings.items()},
        doc_lengths=tuple(lengths),
        doc_ids=tuple(d.id for d in corpus.docs),
        avg_doc_len=corpus.stats.avg_doc_len,
    )


def _idf(doc_count: int, df: int) -> float:
    return math.log(1.0 + (doc_count - df + 0.5) / (df + 0.5))


def bm25_retrieve(
    index: InvertedIndex,
    query: str,
    k: int,
    k1: float = 0.9,
    b: float = 0.4,
) -> list[ScoredDoc]:
    """Top-k documents by BM25.

    score(d) = sum over query tokens t of
        idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(d) / avgdl))
    with idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)).  Repeated query
    tokens contribute once per occurrence.  Ties break on ascending doc id;
    only documents sharing at least one term with the query are returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = normalize(query)
    if not terms:
        raise DataError("empty query")
    scores: dict[int, float] = {}
    n_docs = index.doc_count
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = _idf(n_docs, len(plist))
        for ordinal, tf in plist:
            norm = tf + k1 * (1.0 - b + b * index.doc_lengths[ordinal] / index.avg_doc_len)
            scores[ordinal] = scores.get(ordinal, 0.0) + idf * tf * (k1 + 1.0) / norm
    ranked = sorted(scores.items(), key=lambda item: (-item[1], index.doc_ids[item[0]]))
    return [
        ScoredDoc(doc_id=index.doc_ids[ordinal], score=score, rank=rank)
        for rank, (ordinal, score) in enumerate(ranked[:k], start=1)
    ]


def dense_retrieve(
    table: EmbeddingTable,
    query_vector: "np.ndarray | Sequence[float]",
    k: int,
    normalize_vectors: bool = False,
) -> list[ScoredDoc]:
    """Top-k entries by inner product (cosine when normalize_vectors is set).

    An exact scan over the table; ties break on ascending id.  Zero-norm
    vectors are left unnormalized, so they score 0 everywhere.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query_vector, dtype=np.float64)
    if query.shape != (table.dim,):
        raise DataError(
            f"query vector has dimension {query.shape}, table dimension is {table.dim}"
        )
    ids = list(table.entries.keys())
    matrix = np.stack([table.entries[i] for i in ids])
    if normalize_vectors:
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix = np.divide(matrix, norms, out=matrix.copy(), where=norms > 0)
        qnorm = float(np.linalg.norm(query))
        if qnorm > 0:
            query = query / qnorm
    scores = matrix @ query
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [
        ScoredDoc(doc_id=ids[i], score=float(scores[i]), rank=rank)
        for rank, i in enumerate(order[:k], start=1)
    ]


def interleave_round_robin(
    lists: Sequence[Sequence[T]],
    max_items: int,
    key: Callable[[T], Hashable] | None = None,
) -> list[T]:
    """Merge ranked lists by taking rank 1 of each, then rank 2, and so on.

    An item already emitted (compared by ``key``, identity by default) is
    skipped without back-filling from deeper in its own list, so the output
    can be shorter than max_items.  Within-list relative order is preserved.
    """
    if max_items < 1:
        raise ValueError(f"max_items must be >= 1, got {max_items}")
    keyfn = key if key is not None else lambda item: item
    seen: set[Hashable] = set()
    out: list[T] = []
    for depth in range(max((len(lst) for lst in lists), default=0)):
        for lst in lists:
            if depth >= len(lst):
                continue
            item = lst[depth]
            k = keyfn(item)
            if k in seen:
                continue
            seen.add(k)
            out.append(item)
            if len(out) == max_items:
                return out
    return out


@dataclass(frozen=True)
class RetrievalConfig:
    """Pool-builder configuration.

    mode: "lexical" (BM25) or "dense" (embedding inner product).
    alignment: "query_only", "facet_aligned", "oracle" or "closed_book".
    k: pool size; candidate_n: candidate count gathered before MMR.
    mmr_lambda: enables MMR reranking when set (1.0 = pure relevance).
    """

    mode: str = "lexical"
    alignment: str = "query_only"
    k: int = 10
    candidate_n: int = 50
    mmr_lambda: float | None = None
    bm25_k1: float = 0.9
    bm25_b: float = 0.4

    def __post_init__(self) -> None:
        if self.mode not in ("lexical", "dense"):
            raise ValueError(f"unknown retrieval mode {self.mode!r}")
        if self.alignment not in ("query_only", "facet_aligned", "oracle", "closed_book"):
            raise ValueError(f"unknown alignment {self.alignment!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.candidate_n < 1:
            raise ValueError(f"candidate_n must be >= 1, got {self.candidate_n}")
        if self.mmr_lambda is not None:
            if not 0.0 <= self.mmr_lambda <= 1.0:
                raise ValueError(f"mmr_lambda must be in [0, 1], got {self.mmr_lambda}")
            if self.k > self.candidate_n:
                raise ValueError(
                    f"k ({self.k}) must not exceed candidate_n ({self.candidate_n}) "
                    "when MMR is enabled"
                )
        if self.bm25_k1 < 0:
            raise ValueError(f"bm25_k1 must be >= 0, got {self.bm25_k1}")
        if not 0.0 <= self.bm25_b <= 1.0:
            raise ValueError(f"bm25_b must be in [0, 1], got {self.bm25_b}")


@dataclass(frozen=True)
class PoolEntry:
    doc_id: str
    score: float
    provenance: frozenset[str]


@dataclass(frozen=True)
class EvidencePool:
    instance_id: str
    entries: tuple[PoolEntry, ...]
    builder_config: RetrievalConfig

    def __post_init__(self) -> None:
        ids = [e.doc_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError(f"pool for {self.instance_id!r} contains duplicate doc ids")
        for entry in self.entries:
            if not entry.provenance:
                raise DataError(
                    f"pool for {self.instance_id!r}: entry {entry.doc_id!r} "
                    "has empty provenance"
                )

    @property
    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]


QueryEmbedder = Callable[[str], "np.ndarray | Sequence[float]"]


def split_embeddings(
    table: EmbeddingTable, corpus: Corpus
) -> tuple[EmbeddingTable, QueryEmbedder]:
    """Split a mixed embedding table into document vectors and a query lookup.

    Entries keyed by a corpus document id become the scannable document
    table; every other entry is treated as a query/sub-query text vector.
    Returns (doc_table, query_embedder) ready for :func:`build_pool`, which
    keeps query keys from ever being retrieved as documents.
    """
    doc_entries = {k: v for k, v in table.entries.items() if k in corpus}
    if not doc_entries:
        raise DataError("embedding table contains no corpus document vectors")
    return EmbeddingTable(dim=table.dim, entries=doc_entries), table.vector


def _sub_queries(
    config: RetrievalConfig, instance: ClarificationInstance
) -> list[tuple[str, str]]:
    subs = [(QUERY_LABEL, instance.query)]
    if config.alignment == "facet_aligned":
        if not instance.facets:
            raise DataError(f"instance {instance.id!r} has no facets for aligned retrieval")
        subs.extend(
            (facet_label(i), f"{instance.query} {facet}")
            for i, facet in enumerate(instance.facets)
        )
    return subs


def _retrieve(
    config: RetrievalConfig,
    text: str,
    fetch_n: int,
    index: InvertedIndex | None,
    table: EmbeddingTable | None,
    query_embedder: QueryEmbedder | None,
) -> list[ScoredDoc]:
    if config.mode == "lexical":
        if index is None:
            raise ValueError("lexical retrieval requires an inverted index")
        return bm25_retrieve(index, text, fetch_n, k1=config.bm25_k1, b=config.bm25_b)
    if table is None:
        raise ValueError("dense retrieval requires an embedding table")
    if query_embedder is not None:
        vector = query_embedder(text)
    else:
        # Sub-query vectors are looked up by the sub-query text itself.
        vector = table.vector(text)
    return dense_retrieve(table, vector, fetch_n)


def build_pool(
    config: RetrievalConfig,
    instance: ClarificationInstance,
    index: InvertedIndex | None = None,
    table: EmbeddingTable | None = None,
    query_embedder: QueryEmbedder | None = None,
) -> EvidencePool:
    """Build the evidence pool for one instance under the given config.

    For facet-aligned pools each sub-query fetches a full ranking and the
    rankings are interleaved; a document retrieved by several sub-queries
    keeps the score from the list that first emitted it and the union of
    all retrieving sub-query labels as provenance.

    In dense mode the table is scanned as the document collection, so it
    must hold document vectors only; supply query vectors through
    ``query_embedder`` (see :func:`split_embeddings`) unless the table's
    text keys double as them.
    """
    if config.alignment == "closed_book":
        return EvidencePool(instance_id=instance.id, entries=(), builder_config=config)
    if config.alignment == "oracle":
        entries = tuple(
            PoolEntry(
                doc_id=f"{ORACLE_ID_PREFIX}{i + 1}",
                score=1.0,
                provenance=frozenset({facet_label(i)}),
            )
            for i in range(len(instance.facets))
        )
        return EvidencePool(instance_id=instance.id, entries=entries, builder_config=config)

    use_mmr = config.mmr_lambda is not None
    fetch_n = config.candidate_n if use_mmr else config.k
    rankings: list[tuple[str, list[ScoredDoc]]] = [
        (label, _retrieve(config, text, fetch_n, index, table, query_embedder))
        for label, text in _sub_queries(config, instance)
    ]

    provenance: dict[str, set[str]] = {}
    for label, ranking in rankings:
        for doc in ranking:
            provenance.setdefault(doc.doc_id, set()).add(label)

    merged = interleave_round_robin(
        [ranking for _, ranking in rankings], fetch_n, key=lambda d: d.doc_id
    )

    if use_mmr and merged:
        candidates = [
            ScoredDoc(doc_id=d.doc_id, score=d.score, rank=i + 1)
            for i, d in enumerate(merged)
        ]
        sim = (
            embedding_similarity(table)
            if config.mode == "dense"
            else tfidf_similarity(index)
        )
        merged = mmr_rerank(
            candidates, config.mmr_lambda, min(config.k, len(candidates)), sim
        )

    entries = tuple(
        PoolEntry(
            doc_id=d.doc_id,
            score=d.score,
            provenance=frozenset(provenance[d.doc_id]),
        )
        for d in merged[: config.k]
    )
    return EvidencePool(instance_id=instance.id, entries=entries, builder_config=config)


def mmr_rerank(
    candidates: Sequence[ScoredDoc],
    lam: float,
    k: int,
    sim: Callable[[str, str], float],
) -> list[ScoredDoc]:
    """Greedy maximal-marginal-relevance selection of k candidates.

    Each step picks argmax of lam * rel - (1 - lam) * max similarity to the
    already-selected set, where rel is the min-max normalized candidate
    score.  The first pick is the most relevant candidate; ties break on
    original rank (candidate position).  Scores on the returned docs are
    the original relevance scores, so they need not be monotone.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if not candidates:
        if k > 0:
            raise DataError("cannot rerank an empty candidate list")
        return []
    if k > len(candidates):
        raise ValueError(f"k ({k}) exceeds candidate count ({len(candidates)})")
    scores = [c.score for c in candidates]
    lo, hi = min(scores), max(scores)
    if hi > lo:
        rel = [(s - lo) / (hi - lo) for s in scores]
    else:
        rel = [1.0] * len(scores)

    selected: list[int] = []
    remaining = list(range(len(candidates)))
    while len(selected) < k:
        best_pos = None
        best_val = -math.inf
        for pos in remaining:
            if selected:
                penalty = max(
                    sim(candidates[pos].doc_id, candidates[s].doc_id) for s in selected
                )
                value = lam * rel[pos] - (1.0 - lam) * penalty
            else:
                value = rel[pos]
            if value > best_val:
                best_val = value
                best_pos = pos
        selected.append(best_pos)
        remaining.remove(best_pos)
    return [
        ScoredDoc(doc_id=candidates[pos].doc_id, score=candidates[pos].score, rank=i + 1)
        for i, pos in enumerate(selected)
    ]


def embedding_similarity(table: EmbeddingTable) -> Callable[[str, str], float]:
    """Cosine similarity over an embedding table, keyed by doc id."""
    cache: dict[str, np.ndarray] = {}

    def unit(doc_id: str) -> np.ndarray:
        vec = cache.get(doc_id)
        if vec is None:
            raw = table.vector(doc_id)
            norm = float(np.linalg.norm(raw))
            vec = raw / norm if norm > 0 else raw
            cache[doc_id] = vec
        return vec

    def sim(a: str, b: str) -> float:
        return float(np.dot(unit(a), unit(b)))

    return sim


def tfidf_similarity(index: InvertedIndex) -> Callable[[str, str], float]:
    """Cosine over tf-idf document vectors derived from the inverted index.

    Fallback similarity for MMR on lexical-only runs; idf matches the
    lexical scorer's formula.
    """
    n_docs = index.doc_count
    # Invert postings once instead of scanning per document.
    doc_terms: dict[int, dict[str, float]] = {}
    for term, plist in index.postings.items():
        idf = _idf(n_docs, len(plist))
        for ordinal, tf in plist:
            doc_terms.setdefault(ordinal, {})[term] = tf * idf

    def sim(a: str, b: str) -> float:
        va = doc_terms.get(index.ordinal_of[a], {})
        vb = doc_terms.get(index.ordinal_of[b], {})
        if not va or not vb:
            return 0.0
        if len(vb) < len(va):
            va, vb = vb, va
        dot = sum(w * vb[t] for t, w in va.items() if t in vb)
        na = math.sqrt(sum(w * w for w in va.values()))
        nb = math.sqrt(sum(w * w for w in vb.values()))
        return dot / (na * nb)

    return sim


def entry_text(
    entry: PoolEntry,
    corpus: Corpus | None = None,
    instance: ClarificationInstance | None = None,
) -> str:
    """Resolve one pool entry to its document text.

    Synthetic oracle entries ("oracle:<i>") resolve to the instance's i-th
    facet; everything else is looked up in the corpus.
    """
    if entry.doc_id.startswith(ORACLE_ID_PREFIX):
        if instance is None:
            raise DataError(f"cannot resolve {entry.doc_id!r} without the instance")
        idx = int(entry.doc_id[len(ORACLE_ID_PREFIX):]) - 1
        if not 0 <= idx < len(instance.facets):
            raise DataError(f"{entry.doc_id!r} out of range for instance {instance.id!r}")
        return instance.facets[idx]
    if corpus is None:
        raise DataError(f"cannot resolve {entry.doc_id!r} without a corpus")
    return corpus.doc(entry.doc_id).text


def resolve_texts(
    pool: EvidencePool,
    corpus: Corpus | None = None,
    instance: ClarificationInstance | None = None,
) -> list[str]:
    """Texts of all pool entries, in pool order."""
    return [entry_text(e, corpus, instance) for e in pool.entries]


# --- serialization -------------------------------------------------------


def index_to_dict(index: InvertedIndex) -> dict:
    return {
        "doc_ids": list(index.doc_ids),
        "doc_lengths": list(index.doc_lengths),
        "avg_doc_len": index.avg_doc_len,
        "postings": {
            term: [[o, tf] for o, tf in plist]
            for term, plist in sorted(index.postings.items())
        },
    }


def index_from_dict(raw: dict) -> InvertedIndex:
    try:
        return InvertedIndex(
            postings={
                term: tuple((int(o), int(tf)) for o, tf in plist)
                for term, plist in raw["postings"].items()
            },
            doc_lengths=tuple(int(x) for x in raw["doc_lengths"]),
            doc_ids=tuple(raw["doc_ids"]),
            avg_doc_len=float(raw["avg_doc_len"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed index file: {exc}") from exc


def save_index(index: InvertedIndex, path: str | Path) -> None:
    from .ioutils import atomic_write_text

    atomic_write_text(path, json.dumps(index_to_dict(index), sort_keys=True))


def load_index(path: str | Path) -> InvertedIndex:
    path = Path(path)
    if path.is_dir():
        path = path / "index.json"
    if not path.exists():
        raise DataError(f"index file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return index_from_dict(json.load(fh))


def pool_to_dict(pool: EvidencePool) -> dict:
    return {
        "instance_id": pool.instance_id,
        "config": asdict(pool.builder_config),
        "entries": [
            {
                "doc_id": e.doc_id,
                "score": e.score,
                "provenance": sorted(e.provenance),
            }
            for e in pool.entries
        ],
    }


def pool_from_dict(raw: dict) -> EvidencePool:
    try:
        config = RetrievalConfig(**raw["config"])
        entries = tuple(
            PoolEntry(
                doc_id=e["doc_id"],
                score=float(e["score"]),
                provenance=frozenset(e["provenance"]),
            )
            for e in raw["entries"]
        )
        return EvidencePool(
            instance_id=raw["instance_id"], entries=entries, builder_config=config
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed pool record: {exc}") from exc


def write_pools(pools: Sequence[EvidencePool], path: str | Path) -> None:
    from .ioutils import atomic_write_text

    lines = [json.dumps(pool_to_dict(p), sort_keys=True) for p in pools]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_pools(path: str | Path) -> list[EvidencePool]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"pool file not found: {path}")
    pools = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            pools.append(pool_from_dict(raw))
    return pools
