"""End-to-end experiment runners.

Covers evidence/facet alignment statistics, leave-one-out faithfulness
auditing, evidence-size sweeps, facet-taxonomy bias analysis, full
pool-build/generate/evaluate experiment runs, and a paired bootstrap for
comparing two runs.

Every report carries (evaluated_count, skipped_count, skip_reasons) so its
means stay interpretable when individual instances fail, and all runners
are deterministic given their inputs and seed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import (
    ClarificationInstance,
    Corpus,
    EmbeddingTable,
    load_corpus,
    load_embeddings,
    load_instances,
    normalize,
)
from .errors import ClarikitError, DataError
from .generator import Clarification, GeneratorRequest, extractive_generate, remote_generate
from .ioutils import atomic_write_json, atomic_write_text
from .metrics import (
    METRIC_COLUMNS,
    Embedder,
    MetricReport,
    evaluate_instance,
    exact_match,
    mean_report,
    table_embedder,
    term_overlap,
)
from .retrieval import (
    EvidencePool,
    InvertedIndex,
    RetrievalConfig,
    build_inverted_index,
    build_pool,
    entry_text,
    facet_label,
    resolve_texts,
    split_embeddings,
)

__all__ = [
    "AlignmentReport",
    "LooReport",
    "SweepPoint",
    "SweepReport",
    "TaxonomyReport",
    "ExperimentReport",
    "BootstrapResult",
    "alignment_stats",
    "loo_faithfulness",
    "evidence_size_sweep",
    "taxonomy_analysis",
    "load_experiment_config",
    "run_experiment",
    "paired_bootstrap",
]

GeneratorFn = Callable[[GeneratorRequest], Clarification]
PoolBuilder = Callable[[ClarificationInstance], EvidencePool]


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def _contains_subsequence(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    return any(
        haystack[i : i + len(needle)] == needle
        for i in range(len(haystack) - len(needle) + 1)
    )


@dataclass(frozen=True)
class AlignmentReport:
    """How well evidence pools cover the ground-truth facets."""

    term_overlap_recall: float
    exact_match_recall: float
    per_instance: tuple[tuple[str, float, float], ...]
    config: RetrievalConfig | None
    evaluated_count: int
    skipped_count: int
    skip_reasons: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict:
        return {
            "term_overlap_recall": self.term_overlap_recall,
            "exact_match_recall": self.exact_match_recall,
            "per_instance": [
                {"instance_id": i, "term_overlap_recall": t, "exact_match_recall": e}
                for i, t, e in self.per_instance
            ],
            "config": None if self.config is None else asdict(self.config),
            "evaluated_count": self.evaluated_count,
            "skipped_count": self.skipped_count,
            "skip_reasons": [list(r) for r in self.skip_reasons],
        }


def alignment_stats(
    instances: Sequence[ClarificationInstance],
    pool_builder: PoolBuilder,
    corpus: Corpus | None = None,
    k: int | None = None,
) -> AlignmentReport:
    """Per-instance and mean facet coverage of the built evidence pools.

    term_overlap_recall is the recall of the concatenated evidence text
    against the facet token set; exact_match_recall is the fraction of
    facets appearing verbatim (as a contiguous normalized token run)
    anywhere in the concatenated evidence.
    """
    if not instances:
        raise DataError("no instances given")
    per: list[tuple[str, float, float]] = []
    skips: list[tuple[str, str]] = []
    config: RetrievalConfig | None = None
    for inst in instances:
        try:
            pool = pool_builder(inst)
        except ClarikitError as exc:
            skips.append((inst.id, str(exc)))
            continue
        if config is None:
            config = pool.builder_config
        texts = resolve_texts(pool, corpus, inst)
        if k is not None:
            texts = texts[:k]
        evidence = " ".join(texts)
        evidence_tokens = normalize(evidence)
        if not evidence_tokens:
            per.append((inst.id, 0.0, 0.0))
            continue
        to_recall = term_overlap([evidence], list(inst.facets)).recall
        hits = sum(
            1
            for facet in inst.facets
            if _contains_subsequence(evidence_tokens, normalize(facet))
        )
        per.append((inst.id, to_recall, hits / len(inst.facets)))
    return AlignmentReport(
        term_overlap_recall=_mean([t for _, t, _ in per]),
        exact_match_recall=_mean([e for _, _, e in per]),
        per_instance=tuple(per),
        config=config,
        evaluated_count=len(per),
        skipped_count=len(skips),
        skip_reasons=tuple(skips),
    )


@dataclass(frozen=True)
class LooReport:
    """Leave-one-out faithfulness: recall of a randomly chosen facet before
    and after its supporting evidence is removed from the pool."""

    recall: float
    recall_loo: float
    delta_pct: float
    metric_kind: str
    per_instance: tuple[tuple[str, int, float, float], ...]
    seed: int
    evaluated_count: int
    skipped_count: int
    skip_reasons: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict:
        return {
            "recall": self.recall,
            "recall_loo": self.recall_loo,
            "delta_pct": self.delta_pct,
            "metric_kind": self.metric_kind,
            "per_instance": [
                {
                    "instance_id": i,
                    "chosen_facet_index": fi,
                    "recall": r,
                    "recall_loo": rl,
                }
                for i, fi, r, rl in self.per_instance
            ],
            "seed": self.seed,
            "evaluated_count": self.evaluated_count,
            "skipped_count": self.skipped_count,
            "skip_reasons": [list(r) for r in self.skip_reasons],
        }


def _facet_recall(metric_kind: str, generated: Sequence[str], facet: str) -> float:
    if metric_kind == "term_overlap":
        return term_overlap(list(generated), [facet]).recall
    if metric_kind == "exact_match":
        return exact_match(list(generated), [facet]).recall
    raise ValueError(f"unknown metric kind {metric_kind!r}")


def loo_faithfulness(
    instances: Sequence[ClarificationInstance],
    generator: GeneratorFn,
    base_pool_config: RetrievalConfig,
    *,
    corpus: Corpus | None = None,
    index: InvertedIndex | None = None,
    table: EmbeddingTable | None = None,
    seed: int = 0,
    metric_kind: str = "exact_match",
    k: int | None = None,
    max_facets: int = 5,
    emit_question: bool = False,
    sole_provenance_only: bool = False,
    query_embedder=None,
) -> LooReport:
    """Measure how much a facet's recall drops when its evidence is removed.

    Per instance: pick one facet with an RNG keyed by (seed, instance id)
    so draws are stable under dataset edits, build the facet-aligned pool,
    generate, then drop every entry whose provenance includes the chosen
    facet's label (or only entries retrieved solely by it, with
    ``sole_provenance_only``) and generate again.
    """
    if base_pool_config.alignment != "facet_aligned":
        raise ValueError("leave-one-out requires a facet_aligned pool config")
    if metric_kind not in ("term_overlap", "exact_match"):
        raise ValueError(f"unknown metric kind {metric_kind!r}")
    if not instances:
        raise DataError("no instances given")
    config = replace(base_pool_config, k=k) if k is not None else base_pool_config

    per: list[tuple[str, int, float, float]] = []
    skips: list[tuple[str, str]] = []
    for inst in instances:
        rng = random.Random(f"{seed}:{inst.id}")
        facet_idx = rng.randrange(len(inst.facets))
        facet = inst.facets[facet_idx]
        label = facet_label(facet_idx)
        try:
            pool = build_pool(
                config, inst, index=index, table=table, query_embedder=query_embedder
            )
            texts = resolve_texts(pool, corpus, inst)
            clar = generator(
                GeneratorRequest(inst.query, tuple(texts), max_facets, emit_question)
            )
            recall = _facet_recall(metric_kind, clar.facets, facet)

            if sole_provenance_only:
                kept = [e for e in pool.entries if e.provenance != frozenset({label})]
            else:
                kept = [e for e in pool.entries if label not in e.provenance]
            loo_texts = [entry_text(e, corpus, inst) for e in kept]
            loo_clar = generator(
                GeneratorRequest(inst.query, tuple(loo_texts), max_facets, emit_question)
            )
            recall_loo = _facet_recall(metric_kind, loo_clar.facets, facet)
        except ClarikitError as exc:
            skips.append((inst.id, str(exc)))
            continue
        per.append((inst.id, facet_idx, recall, recall_loo))

    recall = _mean([r for _, _, r, _ in per])
    recall_loo = _mean([r for _, _, _, r in per])
    delta_pct = 100.0 * (recall_loo - recall) / recall if recall > 0 else 0.0
    return LooReport(
        recall=recall,
        recall_loo=recall_loo,
        delta_pct=delta_pct,
        metric_kind=metric_kind,
        per_instance=tuple(per),
        seed=seed,
        evaluated_count=len(per),
        skipped_count=len(skips),
        skip_reasons=tuple(skips),
    )


@dataclass(frozen=True)
class SweepPoint:
    n_evidence: int
    report: MetricReport
    evaluated_count: int
    skipped_count: int


@dataclass(frozen=True)
class SweepReport:
    points: tuple[SweepPoint, ...]
    skip_reasons: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict:
        return {
            "points": [
                {
                    "n_evidence": p.n_evidence,
                    "evaluated_count": p.evaluated_count,
                    "skipped_count": p.skipped_count,
                    **p.report.to_flat_dict(),
                }
                for p in self.points
            ],
            "skip_reasons": [list(r) for r in self.skip_reasons],
        }


def evidence_size_sweep(
    instances: Sequence[ClarificationInstance],
    generator: GeneratorFn,
    pool_config: RetrievalConfig,
    n_values: Sequence[int],
    *,
    corpus: Corpus | None = None,
    index: InvertedIndex | None = None,
    table: EmbeddingTable | None = None,
    embedder: Embedder | None = None,
    max_facets: int = 5,
    emit_question: bool = False,
    query_embedder=None,
) -> SweepReport:
    """Mean metric suite as a function of evidence-pool size.

    Pools are built once at the largest requested size and truncated to
    each n; instances whose generation or evaluation fails at a given n
    are skipped there with a recorded reason.
    """
    if not n_values:
        raise ValueError("n_values is empty")
    if any(n < 1 for n in n_values) or any(
        b <= a for a, b in zip(n_values, n_values[1:])
    ):
        raise ValueError("n_values must be strictly increasing positive integers")
    if not instances:
        raise DataError("no instances given")

    build_config = replace(pool_config, k=max(max(n_values), pool_config.k))
    built: list[tuple[ClarificationInstance, list[str]]] = []
    skips: list[tuple[str, str]] = []
    for inst in instances:
        try:
            pool = build_pool(
                build_config, inst, index=index, table=table, query_embedder=query_embedder
            )
            built.append((inst, resolve_texts(pool, corpus, inst)))
        except ClarikitError as exc:
            skips.append((inst.id, f"pool: {exc}"))

    points: list[SweepPoint] = []
    for n in n_values:
        reports: list[MetricReport] = []
        skipped_here = 0
        for inst, texts in built:
            try:
                clar = generator(
                    GeneratorRequest(inst.query, tuple(texts[:n]), max_facets, emit_question)
                )
                reports.append(evaluate_instance(clar.facets, inst.facets, embedder))
            except ClarikitError as exc:
                skips.append((inst.id, f"n={n}: {exc}"))
                skipped_here += 1
        points.append(
            SweepPoint(
                n_evidence=n,
                report=mean_report(reports),
                evaluated_count=len(reports),
                skipped_count=skipped_here,
            )
        )
    return SweepReport(points=tuple(points), skip_reasons=tuple(skips))


@dataclass(frozen=True)
class TaxonomyReport:
    """Most frequent facet words and how much of the dataset they touch."""

    top_words: tuple[tuple[str, int], ...]
    biased_fraction: float

    def to_dict(self) -> dict:
        return {
            "top_words": [[w, c] for w, c in self.top_words],
            "biased_fraction": self.biased_fraction,
        }


def taxonomy_analysis(
    instances: Sequence[ClarificationInstance], top_k: int = 20
) -> TaxonomyReport:
    """Top facet words by occurrence (stopwords excluded, ties alphabetical)
    and the fraction of instances with a facet containing one of them.

    Degenerate note: if top_k covers the whole facet vocabulary, every
    instance with any non-stopword facet word counts as biased.
    """
    if not instances:
        raise DataError("no instances given")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    counts: dict[str, int] = {}
    for inst in instances:
        for facet in inst.facets:
            for token in normalize(facet, drop_stopwords=True):
                counts[token] = counts.get(token, 0) + 1
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:top_k]
    top = {word for word, _ in ranked}
    biased = sum(
        1
        for inst in instances
        if any(
            top.intersection(normalize(facet, drop_stopwords=True))
            for facet in inst.facets
        )
    )
    return TaxonomyReport(
        top_words=tuple(ranked), biased_fraction=biased / len(instances)
    )


# --- full experiment runs --------------------------------------------------


@dataclass(frozen=True)
class ExperimentReport:
    config_hash: str
    seed: int
    mean: MetricReport
    per_instance: tuple[tuple[str, MetricReport], ...]
    evaluated_count: int
    skipped_count: int
    skip_reasons: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "mean": self.mean.to_flat_dict(),
            "per_instance": [
                {"instance_id": i, **report.to_flat_dict()}
                for i, report in self.per_instance
            ],
            "evaluated_count": self.evaluated_count,
            "skipped_count": self.skipped_count,
            "skip_reasons": [list(r) for r in self.skip_reasons],
        }


_CONFIG_REQUIRED = ("corpus", "instances", "retrieval", "generator", "seed", "output_dir")


def load_experiment_config(path: str | Path) -> dict:
    """Load and validate an experiment config file, failing fast on errors."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(config, dict):
        raise DataError(f"{path}: config must be a JSON object")
    validate_experiment_config(config, base_dir=path.parent)
    return config


def validate_experiment_config(config: dict, base_dir: Path | None = None) -> None:
    for key in _CONFIG_REQUIRED:
        if key not in config:
            raise DataError(f"config missing required key {key!r}")
    base = base_dir or Path(".")
    for key in ("corpus", "instances"):
        p = Path(config[key])
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise DataError(f"config {key} file not found: {p}")
        config[key] = str(p)
    if config.get("embeddings"):
        p = Path(config["embeddings"])
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise DataError(f"config embeddings file not found: {p}")
        config["embeddings"] = str(p)
    try:
        retrieval_cfg = RetrievalConfig(**config["retrieval"])
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid retrieval config: {exc}") from exc
    gen = config["generator"]
    if not isinstance(gen, dict) or gen.get("kind") not in ("extractive", "remote"):
        raise DataError("generator config must set kind to 'extractive' or 'remote'")
    if gen["kind"] == "remote" and not gen.get("endpoint"):
        raise DataError("remote generator config requires an endpoint")
    if retrieval_cfg.mode == "dense" and not config.get("embeddings"):
        raise DataError("dense retrieval requires an embeddings file")
    if config.get("set_sim") not in (None, "indicator", "table"):
        raise DataError("config set_sim must be 'indicator' or 'table'")
    if config.get("set_sim") == "table" and not config.get("embeddings"):
        raise DataError("set_sim 'table' requires an embeddings file")
    if not isinstance(config["seed"], int):
        raise DataError("config seed must be an integer")


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _make_generator(gen_config: dict) -> GeneratorFn:
    if gen_config["kind"] == "extractive":
        return extractive_generate
    endpoint = gen_config["endpoint"]
    timeout = float(gen_config.get("timeout", 30.0))
    return lambda req: remote_generate(endpoint, req, timeout=timeout)


def summary_csv_text(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config_hash", "evaluated_count", "skipped_count", *METRIC_COLUMNS])
    flat = report.mean.to_flat_dict()
    writer.writerow(
        [
            report.config_hash,
            report.evaluated_count,
            report.skipped_count,
            *[f"{flat[col]:.6f}" for col in METRIC_COLUMNS],
        ]
    )
    return buf.getvalue()


def sweep_csv_text(report: SweepReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n_evidence", "evaluated_count", "skipped_count", *METRIC_COLUMNS])
    for point in report.points:
        flat = point.report.to_flat_dict()
        writer.writerow(
            [
                point.n_evidence,
                point.evaluated_count,
                point.skipped_count,
                *[f"{flat[col]:.6f}" for col in METRIC_COLUMNS],
            ]
        )
    return buf.getvalue()


def run_experiment(
    config: dict | str | Path,
    parallelism: int | None = None,
    write_outputs: bool = True,
) -> ExperimentReport:
    """Build pools, generate clarifications, evaluate, and write reports.

    Deterministic for a fixed (config, seed) regardless of parallelism:
    instances are processed as independent work units and reassembled in
    input order.  Outputs (report.json, summary.csv in output_dir) are
    written atomically, and only after the whole run succeeds.
    """
    if isinstance(config, (str, Path)):
        config = load_experiment_config(config)
    else:
        config = dict(config)
        validate_experiment_config(config)

    corpus = load_corpus(config["corpus"])
    instances = load_instances(config["instances"])
    table = load_embeddings(config["embeddings"]) if config.get("embeddings") else None
    retrieval_cfg = RetrievalConfig(**config["retrieval"])
    generator = _make_generator(config["generator"])
    max_facets = int(config["generator"].get("max_facets", 5))
    emit_question = bool(config["generator"].get("emit_question", False))

    index = None
    doc_table = table
    query_embedder = None
    needs_retrieval = retrieval_cfg.alignment in ("query_only", "facet_aligned")
    if retrieval_cfg.mode == "lexical" and needs_retrieval:
        index = build_inverted_index(corpus)
    if retrieval_cfg.mode == "dense" and needs_retrieval:
        doc_table, query_embedder = split_embeddings(table, corpus)

    if config.get("set_sim") == "table":
        if table is None:
            raise DataError("set_sim 'table' requires an embeddings file")
        embedder: Embedder | None = table_embedder(table)
    else:
        embedder = None

    def worker(
        inst: ClarificationInstance,
    ) -> tuple[str, MetricReport | None, str | None]:
        try:
            pool = build_pool(
                retrieval_cfg, inst, index=index, table=doc_table,
                query_embedder=query_embedder,
            )
            texts = resolve_texts(pool, corpus, inst)
            clar = generator(
                GeneratorRequest(inst.query, tuple(texts), max_facets, emit_question)
            )
            report = evaluate_instance(clar.facets, inst.facets, embedder)
            return inst.id, report, None
        except ClarikitError as exc:
            return inst.id, None, str(exc)

    workers = parallelism if parallelism else (os.cpu_count() or 1)
    if workers > 1 and len(instances) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            results = list(pool_exec.map(worker, instances))
    else:
        results = [worker(inst) for inst in instances]

    per_instance = [(iid, rep) for iid, rep, _ in results if rep is not None]
    skips = [(iid, reason) for iid, _, reason in results if reason is not None]
    report = ExperimentReport(
        config_hash=_config_hash(config),
        seed=int(config["seed"]),
        mean=mean_report([rep for _, rep in per_instance]),
        per_instance=tuple(per_instance),
        evaluated_count=len(per_instance),
        skipped_count=len(skips),
        skip_reasons=tuple(skips),
    )

    if write_outputs:
        out_dir = Path(config["output_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_json(out_dir / "report.json", report.to_dict())
        atomic_write_text(out_dir / "summary.csv", summary_csv_text(report))
    return report


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float
    ci_low: float
    ci_high: float
    iterations: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "mean_diff": self.mean_diff,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def paired_bootstrap(
    rows_a: Sequence[dict],
    rows_b: Sequence[dict],
    metric: str,
    iterations: int = 1000,
    seed: int = 0,
) -> BootstrapResult:
    """Seeded paired bootstrap over per-instance metric rows.

    Rows are dicts carrying "instance_id" and flat metric keys (as emitted
    in report.json).  Reports the mean of B minus A and the 2.5/97.5
    percentile interval of resampled mean differences.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")

    def extract(rows: Sequence[dict], name: str) -> dict[str, float]:
        out = {}
        for row in rows:
            if "instance_id" not in row:
                raise DataError(f"{name}: row missing 'instance_id'")
            if metric not in row:
                raise DataError(f"{name}: row missing metric {metric!r}")
            out[row["instance_id"]] = float(row[metric])
        return out

    a = extract(rows_a, "A")
    b = extract(rows_b, "B")
    if set(a) != set(b):
        missing = sorted(set(a).symmetric_difference(set(b)))
        raise DataError(f"instance ids differ between A and B: {missing}")
    if not a:
        raise DataError("no instances to bootstrap over")

    ids = sorted(a)
    diffs = np.array([b[i] - a[i] for i in ids], dtype=np.float64)
    rng = np.random.default_rng(seed)
    samples = rng.integers(0, len(ids), size=(iterations, len(ids)))
    means = diffs[samples].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return BootstrapResult(
        mean_diff=float(diffs.mean()),
        ci_low=float(lo),
        ci_high=float(hi),
        iterations=iterations,
        seed=seed,
    )
