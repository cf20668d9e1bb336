"""Facet generators: an offline extractive baseline, a remote HTTP client,
and round-robin fusion of facet lists.

The remote wire protocol (HTTP POST, JSON) is:

    request:  {"query": str, "evidence": [str], "max_facets": int,
               "emit_question": bool}
    response: {"question": str|null, "facets": [str]}   (status 200)

Any generator plugs into the harness as a callable taking a
GeneratorRequest and returning a Clarification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import requests

from .corpus import normalize
from .errors import GeneratorError, RetriableGeneratorError
from .retrieval import interleave_round_robin

__all__ = [
    "Clarification",
    "GeneratorRequest",
    "DEFAULT_QUESTION",
    "extractive_generate",
    "remote_generate",
    "fuse_round_robin",
]

logger = logging.getLogger(__name__)

DEFAULT_QUESTION = "Select one to refine your search"


@dataclass(frozen=True)
class Clarification:
    question: str | None
    facets: tuple[str, ...]


@dataclass(frozen=True)
class GeneratorRequest:
    query: str
    evidence_texts: tuple[str, ...]
    max_facets: int = 5
    emit_question: bool = False

    def __post_init__(self) -> None:
        if self.max_facets < 1:
            raise ValueError(f"max_facets must be >= 1, got {self.max_facets}")


def extractive_generate(request: GeneratorRequest) -> Clarification:
    """Deterministic extractive baseline: frequent evidence n-grams as facets.

    Candidates are the unigrams and bigrams of the stopword-filtered
    evidence token streams, minus n-grams made up entirely of query tokens.
    Each candidate scores occurrence count times the number of distinct
    evidence texts containing it; ties go to the earlier first occurrence.
    Faithful by construction: every emitted facet appears contiguously in
    some evidence text's normalized token stream.
    """
    if not request.evidence_texts:
        raise GeneratorError("no evidence")
    query_tokens = set(normalize(request.query))

    counts: dict[tuple[str, ...], int] = {}
    docs: dict[tuple[str, ...], set[int]] = {}
    first_seen: dict[tuple[str, ...], tuple[int, int, int]] = {}

    def record(gram: tuple[str, ...], doc_idx: int, tok_idx: int) -> None:
        if all(tok in query_tokens for tok in gram):
            return
        counts[gram] = counts.get(gram, 0) + 1
        docs.setdefault(gram, set()).add(doc_idx)
        first_seen.setdefault(gram, (doc_idx, tok_idx, len(gram)))

    for doc_idx, text in enumerate(request.evidence_texts):
        tokens = normalize(text, drop_stopwords=True)
        for tok_idx, token in enumerate(tokens):
            record((token,), doc_idx, tok_idx)
            if tok_idx + 1 < len(tokens):
                record((token, tokens[tok_idx + 1]), doc_idx, tok_idx)

    if not counts:
        raise GeneratorError("no candidates")

    ranked = sorted(
        counts,
        key=lambda gram: (-counts[gram] * len(docs[gram]), first_seen[gram]),
    )
    facets = tuple(" ".join(gram) for gram in ranked[: request.max_facets])
    question = DEFAULT_QUESTION if request.emit_question else None
    return Clarification(question=question, facets=facets)


def remote_generate(
    endpoint: str,
    request: GeneratorRequest,
    timeout: float = 30.0,
) -> Clarification:
    """Call an external generator service and validate its clarification.

    Timeouts and connection failures raise RetriableGeneratorError; any
    non-200 status or malformed body raises GeneratorError with the raw
    response attached.  Returned facets are normalized and deduplicated,
    and truncated to max_facets with a logged warning if the service
    over-produces.
    """
    payload = {
        "query": request.query,
        "evidence": list(request.evidence_texts),
        "max_facets": request.max_facets,
        "emit_question": request.emit_question,
    }
    try:
        response = requests.post(endpoint, json=payload, timeout=timeout)
    except requests.Timeout as exc:
        raise RetriableGeneratorError(f"generator timed out after {timeout}s") from exc
    except requests.ConnectionError as exc:
        raise RetriableGeneratorError(f"cannot reach generator at {endpoint}: {exc}") from exc
    except requests.RequestException as exc:
        raise GeneratorError(f"generator request failed: {exc}") from exc

    if response.status_code != 200:
        raise GeneratorError(
            f"generator returned status {response.status_code}: {response.text[:500]}"
        )
    try:
        body = response.json()
    except ValueError as exc:
        raise GeneratorError(f"malformed generator response: {response.text[:500]}") from exc
    if not isinstance(body, dict) or not isinstance(body.get("facets"), list):
        raise GeneratorError(f"malformed generator response: {response.text[:500]}")
    question = body.get("question")
    if question is not None and not isinstance(question, str):
        raise GeneratorError(f"malformed generator response: {response.text[:500]}")

    facets: list[str] = []
    seen: set[str] = set()
    for raw in body["facets"]:
        if not isinstance(raw, str):
            raise GeneratorError(f"malformed generator response: {response.text[:500]}")
        norm = " ".join(normalize(raw))
        if not norm or norm in seen:
            continue
        seen.add(norm)
        facets.append(norm)
    if not facets:
        raise GeneratorError("generator returned no facets")
    if len(facets) > request.max_facets:
        logger.warning(
            "generator returned %d facets, truncating to max_facets=%d",
            len(facets),
            request.max_facets,
        )
        facets = facets[: request.max_facets]
    return Clarification(question=question, facets=tuple(facets))


def fuse_round_robin(
    facet_lists: Sequence[Sequence[str]], max_facets: int = 5
) -> list[str]:
    """Round-robin fusion of facet lists from several generators.

    Facets are normalized first; duplicates are skipped without back-fill,
    and the output is capped at max_facets.
    """
    if max_facets < 1:
        raise ValueError(f"max_facets must be >= 1, got {max_facets}")
    normalized: list[list[str]] = []
    for lst in facet_lists:
        norm = [" ".join(normalize(f)) for f in lst]
        normalized.append([f for f in norm if f])
    if not any(normalized):
        raise ValueError("all facet lists are empty")
    return interleave_round_robin(normalized, max_facets)
