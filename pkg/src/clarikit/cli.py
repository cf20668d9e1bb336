"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 generator or I/O
error.  All output files are written atomically (temp file + rename), so a
killed run never leaves a truncated report behind.  Every subcommand
accepts --json to emit a single machine-readable JSON document instead of
the one-line summary.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import harness, retrieval
from .corpus import load_corpus, load_embeddings, load_instances
from .errors import DataError, GeneratorError
from .harness import (
    alignment_stats,
    evidence_size_sweep,
    load_experiment_config,
    loo_faithfulness,
    paired_bootstrap,
    run_experiment,
    sweep_csv_text,
    taxonomy_analysis,
)
from .ioutils import atomic_write_json, atomic_write_text
from .metrics import METRIC_COLUMNS, evaluate_instance, mean_report, table_embedder
from .retrieval import (
    RetrievalConfig,
    build_inverted_index,
    build_pool,
    load_index,
    save_index,
    split_embeddings,
    write_pools,
)

__all__ = ["main", "build_parser"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems via exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="clarikit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--json", action="store_true", help="emit machine-readable JSON")
        return p

    p = add("index", "build an inverted index from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory for index files")
    p.set_defaults(func=cmd_index)

    p = add("retrieve", "run one BM25 query against a saved index")
    p.add_argument("--index", required=True, help="index directory or index.json")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.set_defaults(func=cmd_retrieve)

    p = add("pool", "build evidence pools for a set of instances")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--instances", help="override the config's instances path")
    p.add_argument("--out", required=True, help="output JSONL of pools")
    p.set_defaults(func=cmd_pool)

    p = add("evaluate", "score generated facets against ground truth")
    p.add_argument("--generated", required=True, help="JSONL: {id, facets}")
    p.add_argument("--truth", required=True, help="instances JSONL")
    p.add_argument("--embeddings", help="embedding table for set_sim")
    p.add_argument("--out", required=True, help="output JSONL report path")
    p.set_defaults(func=cmd_evaluate)

    p = add("align-stats", "evidence/facet alignment statistics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align_stats)

    p = add("loo", "leave-one-out faithfulness audit")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument(
        "--metric", choices=("term_overlap", "exact_match"), default="exact_match"
    )
    p.add_argument(
        "--sole-provenance",
        action="store_true",
        help="drop only entries retrieved solely by the chosen facet's sub-query",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loo)

    p = add("sweep", "metric suite vs evidence-pool size")
    p.add_argument("--config", required=True)
    p.add_argument("--n", required=True, help="comma-separated sizes, e.g. 1,5,10,20")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_sweep)

    p = add("taxonomy", "frequent facet words and taxonomy-bias fraction")
    p.add_argument("--instances", required=True)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_taxonomy)

    p = add("experiment", "full pool -> generate -> evaluate run")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--parallelism",
        type=int,
        default=None,
        help="worker count (default: hardware parallelism); results identical either way",
    )
    p.set_defaults(func=cmd_experiment)

    p = add("bootstrap", "paired bootstrap between two experiment reports")
    p.add_argument("--a", required=True, help="report.json of run A")
    p.add_argument("--b", required=True, help="report.json of run B")
    p.add_argument("--metric", required=True, help=f"one of {', '.join(METRIC_COLUMNS)}")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bootstrap)

    return parser


def _emit(args, human: str, payload: dict) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def _load_resources(config: dict):
    """Corpus, instances, doc table, index, config and query embedder."""
    corpus = load_corpus(config["corpus"])
    instances = load_instances(config["instances"])
    table = load_embeddings(config["embeddings"]) if config.get("embeddings") else None
    cfg = RetrievalConfig(**config["retrieval"])
    index = None
    query_embedder = None
    needs_retrieval = cfg.alignment in ("query_only", "facet_aligned")
    if cfg.mode == "lexical" and needs_retrieval:
        index = build_inverted_index(corpus)
    if cfg.mode == "dense" and needs_retrieval:
        table, query_embedder = split_embeddings(table, corpus)
    return corpus, instances, table, index, cfg, query_embedder


def cmd_index(args) -> int:
    corpus = load_corpus(args.corpus)
    index = build_inverted_index(corpus)
    out = Path(args.out)
    save_index(index, out / "index.json" if not out.suffix else out)
    _emit(
        args,
        f"indexed {index.doc_count} documents, {len(index.postings)} terms -> {args.out}",
        {
            "doc_count": index.doc_count,
            "term_count": len(index.postings),
            "avg_doc_len": index.avg_doc_len,
            "out": str(args.out),
        },
    )
    return 0


def cmd_retrieve(args) -> int:
    index = load_index(args.index)
    results = retrieval.bm25_retrieve(index, args.query, args.k, k1=args.k1, b=args.b)
    rows = [{"rank": r.rank, "doc_id": r.doc_id, "score": r.score} for r in results]
    if args.json:
        print(json.dumps({"query": args.query, "results": rows}, sort_keys=True))
    else:
        for row in rows:
            print(f"{row['rank']:>3}  {row['score']:.6f}  {row['doc_id']}")
        print(f"{len(rows)} results for {args.query!r}")
    return 0


def cmd_pool(args) -> int:
    config = load_experiment_config(args.config)
    if args.instances:
        config["instances"] = args.instances
    corpus, instances, table, index, cfg, query_embedder = _load_resources(config)
    pools = []
    skipped = []
    for inst in instances:
        try:
            pools.append(
                build_pool(cfg, inst, index=index, table=table, query_embedder=query_embedder)
            )
        except DataError as exc:
            skipped.append((inst.id, str(exc)))
    write_pools(pools, args.out)
    for inst_id, reason in skipped:
        print(f"skipped {inst_id}: {reason}", file=sys.stderr)
    _emit(
        args,
        f"wrote {len(pools)} pools to {args.out} ({len(skipped)} skipped)",
        {"pools": len(pools), "skipped": len(skipped), "out": str(args.out)},
    )
    return 0


def _stream_generated(path: Path):
    """Yield (id, facets) records from a generated-facets JSONL file."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "id" not in obj or "facets" not in obj:
                raise DataError(f"{path}: line {lineno}: expected fields 'id' and 'facets'")
            if not isinstance(obj["facets"], list) or not all(
                isinstance(f, str) for f in obj["facets"]
            ):
                raise DataError(f"{path}: line {lineno}: 'facets' must be a list of strings")
            yield obj["id"], obj["facets"]


def cmd_evaluate(args) -> int:
    generated_path = Path(args.generated)
    if not generated_path.exists():
        raise DataError(f"file not found: {generated_path}")
    truth = load_instances(args.truth)
    embedder = None
    if args.embeddings:
        embedder = table_embedder(load_embeddings(args.embeddings))

    # Stream the generated file with a read-ahead buffer: O(1) memory when
    # the two files share id order, graceful otherwise.
    gen_iter = _stream_generated(generated_path)
    buffered: dict[str, list[str]] = {}
    exhausted = False

    def facets_for(inst_id: str) -> list[str]:
        nonlocal exhausted
        if inst_id in buffered:
            return buffered.pop(inst_id)
        while not exhausted:
            try:
                gid, facets = next(gen_iter)
            except StopIteration:
                exhausted = True
                break
            if gid == inst_id:
                return facets
            buffered[gid] = facets
        raise DataError(f"no generated facets for instance id {inst_id!r}")

    rows = []
    reports = []
    for inst in truth:
        facets = facets_for(inst.id)
        report = evaluate_instance(facets, list(inst.facets), embedder)
        reports.append(report)
        rows.append({"instance_id": inst.id, **report.to_flat_dict()})

    mean = mean_report(reports)
    lines = [json.dumps(row, sort_keys=True) for row in rows]
    lines.append(json.dumps({"instance_id": "__mean__", **mean.to_flat_dict()}, sort_keys=True))
    atomic_write_text(args.out, "\n".join(lines) + "\n")

    csv_path = Path(args.out).with_suffix(".csv")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["instance_id", *METRIC_COLUMNS])
    for row in rows:
        writer.writerow([row["instance_id"], *[f"{row[c]:.6f}" for c in METRIC_COLUMNS]])
    flat = mean.to_flat_dict()
    writer.writerow(["__mean__", *[f"{flat[c]:.6f}" for c in METRIC_COLUMNS]])
    atomic_write_text(csv_path, buf.getvalue())

    _emit(
        args,
        f"evaluated {len(rows)} instances -> {args.out} "
        f"(exact_match_f1={flat['exact_match_f1']:.4f})",
        {"evaluated": len(rows), "out": str(args.out), "mean": flat},
    )
    return 0


def cmd_align_stats(args) -> int:
    config = load_experiment_config(args.config)
    corpus, instances, table, index, cfg, query_embedder = _load_resources(config)
    report = alignment_stats(
        instances,
        lambda inst: build_pool(
            cfg, inst, index=index, table=table, query_embedder=query_embedder
        ),
        corpus=corpus,
    )
    atomic_write_json(args.out, report.to_dict())
    _emit(
        args,
        f"alignment over {report.evaluated_count} instances: "
        f"term_overlap_recall={report.term_overlap_recall:.4f} "
        f"exact_match_recall={report.exact_match_recall:.4f} -> {args.out}",
        report.to_dict(),
    )
    return 0


def cmd_loo(args) -> int:
    config = load_experiment_config(args.config)
    corpus, instances, table, index, cfg, query_embedder = _load_resources(config)
    generator = harness._make_generator(config["generator"])
    max_facets = int(config["generator"].get("max_facets", 5))
    report = loo_faithfulness(
        instances,
        generator,
        cfg,
        corpus=corpus,
        index=index,
        table=table,
        seed=args.seed,
        metric_kind=args.metric,
        max_facets=max_facets,
        sole_provenance_only=args.sole_provenance,
        query_embedder=query_embedder,
    )
    atomic_write_json(args.out, report.to_dict())
    _emit(
        args,
        f"LOO ({args.metric}) over {report.evaluated_count} instances: "
        f"recall={report.recall:.4f} recall_loo={report.recall_loo:.4f} "
        f"delta={report.delta_pct:+.2f}% -> {args.out}",
        report.to_dict(),
    )
    return 0


def cmd_sweep(args) -> int:
    config = load_experiment_config(args.config)
    try:
        n_values = [int(x) for x in args.n.split(",") if x.strip()]
    except ValueError as exc:
        raise _UsageError(f"--n must be comma-separated integers: {exc}")
    corpus, instances, table, index, cfg, query_embedder = _load_resources(config)
    generator = harness._make_generator(config["generator"])
    max_facets = int(config["generator"].get("max_facets", 5))
    report = evidence_size_sweep(
        instances,
        generator,
        cfg,
        n_values,
        corpus=corpus,
        index=index,
        table=table,
        max_facets=max_facets,
        query_embedder=query_embedder,
    )
    atomic_write_text(args.out, sweep_csv_text(report))
    _emit(
        args,
        f"swept n={n_values} over {len(instances)} instances -> {args.out}",
        report.to_dict(),
    )
    return 0


def cmd_taxonomy(args) -> int:
    instances = load_instances(args.instances)
    report = taxonomy_analysis(instances, top_k=args.top_k)
    atomic_write_json(args.out, report.to_dict())
    _emit(
        args,
        f"top-{args.top_k} facet words cover {report.biased_fraction:.2%} "
        f"of {len(instances)} instances -> {args.out}",
        report.to_dict(),
    )
    return 0


def cmd_experiment(args) -> int:
    if args.parallelism is not None and args.parallelism < 1:
        raise _UsageError("--parallelism must be >= 1")
    config = load_experiment_config(args.config)
    report = run_experiment(config, parallelism=args.parallelism)
    flat = report.mean.to_flat_dict()
    _emit(
        args,
        f"experiment {report.config_hash[:12]}: {report.evaluated_count} evaluated, "
        f"{report.skipped_count} skipped, exact_match_f1={flat['exact_match_f1']:.4f} "
        f"-> {config['output_dir']}",
        report.to_dict(),
    )
    return 0


def _load_report_rows(path: str) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"report file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or "per_instance" not in doc:
        raise DataError(f"{p}: not an experiment report (missing 'per_instance')")
    return doc["per_instance"]


def cmd_bootstrap(args) -> int:
    result = paired_bootstrap(
        _load_report_rows(args.a),
        _load_report_rows(args.b),
        args.metric,
        iterations=args.iters,
        seed=args.seed,
    )
    _emit(
        args,
        f"mean diff (B-A) on {args.metric}: {result.mean_diff:+.6f} "
        f"[{result.ci_low:+.6f}, {result.ci_high:+.6f}] "
        f"({result.iterations} iterations, seed {result.seed})",
        result.to_dict(),
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help exits 0
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except GeneratorError as exc:
        print(f"generator error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
