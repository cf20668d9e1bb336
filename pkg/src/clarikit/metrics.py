"""Facet-set evaluation metrics.

Generated and ground-truth facet lists are compared after shared
normalization (see :func:`clarikit.corpus.normalize`):

* term_overlap  - word-level precision/recall/F1 over the union of facet tokens
* exact_match   - facet-level precision/recall/F1 over whole normalized facets
* set_bleu      - per-order 1..4 sentence BLEU averaged over best-matching
                  facet pairs, with unmatched facets scoring zero
* set_sim       - embedding cosine averaged over the same best-matching pairs,
                  with a pluggable embedder

Pair matching maximizes total BLEU-1 over an optimal assignment; ties are
broken toward the lexicographically smallest (generated, truth) index
sequence so results are fully deterministic.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import normalize
from .errors import DataError

__all__ = [
    "PRF",
    "FacetAssignment",
    "MetricReport",
    "METRIC_COLUMNS",
    "normalized_facet",
    "cosine",
    "term_overlap",
    "exact_match",
    "bleu_n",
    "match_facet_pairs",
    "set_bleu",
    "set_sim",
    "evaluate_instance",
    "indicator_embedder",
    "table_embedder",
    "mean_report",
]

Embedder = Callable[[str], "np.ndarray | Sequence[float]"]


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "PRF":
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
        return cls(precision=precision, recall=recall, f1=f1)


@dataclass(frozen=True)
class FacetAssignment:
    """Best BLEU-1 pairing between generated and ground-truth facets.

    ``pairs`` holds (generated index, truth index, BLEU-1 score) sorted by
    generated index; exactly min(|F|, |G|) pairs are formed.
    """

    pairs: tuple[tuple[int, int, float], ...]
    unmatched_generated: tuple[int, ...]
    unmatched_truth: tuple[int, ...]


# Canonical column order for CSV/JSON report emission.
METRIC_COLUMNS = (
    "term_overlap_precision",
    "term_overlap_recall",
    "term_overlap_f1",
    "exact_match_precision",
    "exact_match_recall",
    "exact_match_f1",
    "set_sim_precision",
    "set_sim_recall",
    "set_sim_f1",
    "set_bleu1",
    "set_bleu2",
    "set_bleu3",
    "set_bleu4",
)


@dataclass(frozen=True)
class MetricReport:
    term_overlap: PRF
    exact_match: PRF
    set_sim: PRF
    set_bleu: tuple[float, float, float, float]

    def to_flat_dict(self) -> dict[str, float]:
        return {
            "term_overlap_precision": self.term_overlap.precision,
            "term_overlap_recall": self.term_overlap.recall,
            "term_overlap_f1": self.term_overlap.f1,
            "exact_match_precision": self.exact_match.precision,
            "exact_match_recall": self.exact_match.recall,
            "exact_match_f1": self.exact_match.f1,
            "set_sim_precision": self.set_sim.precision,
            "set_sim_recall": self.set_sim.recall,
            "set_sim_f1": self.set_sim.f1,
            "set_bleu1": self.set_bleu[0],
            "set_bleu2": self.set_bleu[1],
            "set_bleu3": self.set_bleu[2],
            "set_bleu4": self.set_bleu[3],
        }

    @classmethod
    def from_flat_dict(cls, flat: dict[str, float]) -> "MetricReport":
        return cls(
            term_overlap=PRF(
                flat["term_overlap_precision"],
                flat["term_overlap_recall"],
                flat["term_overlap_f1"],
            ),
            exact_match=PRF(
                flat["exact_match_precision"],
                flat["exact_match_recall"],
                flat["exact_match_f1"],
            ),
            set_sim=PRF(
                flat["set_sim_precision"], flat["set_sim_recall"], flat["set_sim_f1"]
            ),
            set_bleu=(
                flat["set_bleu1"],
                flat["set_bleu2"],
                flat["set_bleu3"],
                flat["set_bleu4"],
            ),
        )


def normalized_facet(facet: str) -> str:
    """Canonical single-space form of a facet, used for facet-level equality."""
    return " ".join(normalize(facet))


def cosine(u: "np.ndarray | Sequence[float]", v: "np.ndarray | Sequence[float]") -> float:
    """Cosine similarity; zero-norm vectors compare as 0.0."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _require_nonempty(generated: Sequence[str], truth: Sequence[str]) -> None:
    if not generated:
        raise DataError("generated facet list is empty")
    if not truth:
        raise DataError("truth facet list is empty")


def _token_union(facets: Sequence[str], side: str) -> set[str]:
    tokens: set[str] = set()
    for facet in facets:
        tokens.update(normalize(facet))
    if not tokens:
        raise DataError(f"{side} facets normalize to an empty token set")
    return tokens


def term_overlap(generated: Sequence[str], truth: Sequence[str]) -> PRF:
    """Word-level overlap between the token sets of the two facet lists."""
    _require_nonempty(generated, truth)
    wf = _token_union(generated, "generated")
    wg = _token_union(truth, "truth")
    inter = len(wf & wg)
    return PRF.from_pr(inter / len(wf), inter / len(wg))


def exact_match(generated: Sequence[str], truth: Sequence[str]) -> PRF:
    """Facet-level overlap: whole facets equal after normalization, sets deduplicated."""
    _require_nonempty(generated, truth)
    fs = {normalized_facet(f) for f in generated} - {""}
    gs = {normalized_facet(g) for g in truth} - {""}
    if not fs:
        raise DataError("generated facets normalize to an empty token set")
    if not gs:
        raise DataError("truth facets normalize to an empty token set")
    inter = len(fs & gs)
    return PRF.from_pr(inter / len(fs), inter / len(gs))


def _ngram_counts(tokens: list[str], order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def bleu_n(candidate: str, reference: str, n: int) -> float:
    """Sentence BLEU with uniform weights over orders 1..n.

    Orders >= 2 use add-one smoothing, (matches+1)/(total+1), with the total
    floored at one n-gram so degenerate short candidates score below 1.0
    rather than dividing by zero.  Brevity penalty is exp(1 - r/c) for c < r.
    An order-1 precision of zero short-circuits to 0.0.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    cand = normalize(candidate)
    ref = normalize(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        total = max(len(cand) - order + 1, 0)
        if total > 0:
            ref_counts = _ngram_counts(ref, order)
            matches = sum(
                min(count, ref_counts[gram])
                for gram, count in _ngram_counts(cand, order).items()
            )
        else:
            matches = 0
        if order == 1:
            if matches == 0:
                return 0.0
            precision = matches / total
        else:
            precision = (matches + 1) / (max(total, 1) + 1)
        log_sum += math.log(precision)
    if len(cand) < len(ref):
        bp = math.exp(1 - len(ref) / len(cand))
    else:
        bp = 1.0
    return bp * math.exp(log_sum / n)


def match_facet_pairs(generated: Sequence[str], truth: Sequence[str]) -> FacetAssignment:
    """Optimal BLEU-1 assignment between the two facet lists.

    Searches all assignments of the smaller side (with branch-and-bound
    pruning), scoring totals with math.fsum so ties are arithmetic-order
    independent, and keeps the lexicographically smallest maximizer.
    """
    _require_nonempty(generated, truth)
    m, n = len(generated), len(truth)
    score = [[bleu_n(f, g, 1) for g in truth] for f in generated]
    n_pairs = min(m, n)

    if all(value == 0.0 for row in score for value in row):
        # Every assignment ties at zero; the lexicographically smallest is
        # the diagonal prefix.
        pairs = tuple((i, i, 0.0) for i in range(n_pairs))
        return FacetAssignment(
            pairs=pairs,
            unmatched_generated=tuple(range(n_pairs, m)),
            unmatched_truth=tuple(range(n_pairs, n)),
        )

    # Optimistic completion bound: best score each remaining generated facet
    # could contribute, accumulated from the back.
    row_max = [max(row) for row in score]
    suffix_bound = [0.0] * (m + 1)
    for i in range(m - 1, -1, -1):
        suffix_bound[i] = suffix_bound[i + 1] + row_max[i]

    best_total = -math.inf
    best_pairs: list[tuple[int, int]] = []
    current: list[tuple[int, int]] = []
    used = [False] * n

    def walk(i: int, partial: float) -> None:
        nonlocal best_total, best_pairs
        placed = len(current)
        if placed == n_pairs:
            total = math.fsum(score[g][t] for g, t in current)
            if total > best_total:
                best_total = total
                best_pairs = list(current)
            return
        # Margin absorbs float slop between the running partial and fsum totals.
        if partial + suffix_bound[i] <= best_total - 1e-9:
            return
        for t in range(n):
            if used[t]:
                continue
            used[t] = True
            current.append((i, t))
            walk(i + 1, partial + score[i][t])
            current.pop()
            used[t] = False
        if (m - i - 1) >= (n_pairs - placed):
            walk(i + 1, partial)

    walk(0, 0.0)

    pairs = tuple((g, t, score[g][t]) for g, t in best_pairs)
    matched_g = {g for g, _ in best_pairs}
    matched_t = {t for _, t in best_pairs}
    return FacetAssignment(
        pairs=pairs,
        unmatched_generated=tuple(i for i in range(m) if i not in matched_g),
        unmatched_truth=tuple(j for j in range(n) if j not in matched_t),
    )


def set_bleu(generated: Sequence[str], truth: Sequence[str]) -> tuple[float, float, float, float]:
    """Mean BLEU-1..4 over matched pairs; unmatched facets count as zeros."""
    assignment = match_facet_pairs(generated, truth)
    denom = max(len(generated), len(truth))
    values = []
    for order in range(1, 5):
        total = math.fsum(bleu_n(generated[g], truth[t], order) for g, t, _ in assignment.pairs)
        values.append(total / denom)
    return (values[0], values[1], values[2], values[3])


def set_sim(generated: Sequence[str], truth: Sequence[str], embedder: Embedder) -> PRF:
    """Embedding-similarity counterpart of set_bleu over the same pairing.

    Facet texts are normalized before embedding; per-pair similarity is the
    cosine of the two facet vectors clipped to [0, 1].
    """
    assignment = match_facet_pairs(generated, truth)
    sims = []
    for g, t, _ in assignment.pairs:
        va = _embed(embedder, generated[g])
        vb = _embed(embedder, truth[t])
        sims.append(min(max(cosine(va, vb), 0.0), 1.0))
    total = math.fsum(sims)
    return PRF.from_pr(total / len(generated), total / len(truth))


def _embed(embedder: Embedder, facet: str) -> "np.ndarray | Sequence[float]":
    try:
        return embedder(normalized_facet(facet))
    except Exception as exc:
        raise DataError(f"embedder failed for facet {facet!r}: {exc}") from exc


def indicator_embedder(*facet_lists: Sequence[str]) -> Embedder:
    """One-hot embedder over the distinct normalized facets given.

    Identical normalized facets get cosine 1, distinct ones 0, so set_sim
    degrades to an exact-match similarity when no real embeddings exist.
    Unknown strings map to the zero vector (similarity 0).
    """
    vocab = sorted({normalized_facet(f) for lst in facet_lists for f in lst})
    position = {text: i for i, text in enumerate(vocab)}
    dim = max(len(vocab), 1)

    def embed(text: str) -> np.ndarray:
        vec = np.zeros(dim, dtype=np.float64)
        idx = position.get(normalized_facet(text))
        if idx is not None:
            vec[idx] = 1.0
        return vec

    return embed


def table_embedder(table) -> Embedder:
    """Embedder that looks facets up in an EmbeddingTable by normalized text."""

    def embed(text: str) -> np.ndarray:
        return table.vector(normalized_facet(text))

    return embed


def evaluate_instance(
    generated: Sequence[str],
    truth: Sequence[str],
    embedder: Embedder | None = None,
) -> MetricReport:
    """Full metric suite for one generated-vs-truth facet comparison.

    Without an embedder, set_sim falls back to the indicator embedding over
    the two facet lists.
    """
    _require_nonempty(generated, truth)
    if embedder is None:
        embedder = indicator_embedder(generated, truth)
    return MetricReport(
        term_overlap=term_overlap(generated, truth),
        exact_match=exact_match(generated, truth),
        set_sim=set_sim(generated, truth, embedder),
        set_bleu=set_bleu(generated, truth),
    )


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Field-wise mean of metric reports; an empty sequence yields all zeros."""
    if not reports:
        zero = PRF(0.0, 0.0, 0.0)
        return MetricReport(zero, zero, zero, (0.0, 0.0, 0.0, 0.0))
    count = len(reports)

    def mean_prf(select: Callable[[MetricReport], PRF]) -> PRF:
        return PRF(
            precision=math.fsum(select(r).precision for r in reports) / count,
            recall=math.fsum(select(r).recall for r in reports) / count,
            f1=math.fsum(select(r).f1 for r in reports) / count,
        )

    bleu = tuple(
        math.fsum(r.set_bleu[i] for r in reports) / count for i in range(4)
    )
    return MetricReport(
        term_overlap=mean_prf(lambda r: r.term_overlap),
        exact_match=mean_prf(lambda r: r.exact_match),
        set_sim=mean_prf(lambda r: r.set_sim),
        set_bleu=(bleu[0], bleu[1], bleu[2], bleu[3]),
    )
