"""Acceptance suite: one test per release criterion, each printing a
pass/fail line.  Run with `pytest tests/test_acceptance.py -s` (or -rA) to
see the lines."""

import functools
import itertools
import json
import math
import random
import time

import pytest

from conftest import constant_generator, make_planted
from test_metrics import brute_force_pairs, set_bleu_from_pairs, set_sim_from_pairs
from test_retrieval import brute_force_mmr, round_robin_oracle

from clarikit.cli import main as cli_main
from clarikit.generator import extractive_generate, fuse_round_robin
from clarikit.harness import alignment_stats, loo_faithfulness, taxonomy_analysis
from clarikit.corpus import ClarificationInstance, normalize
from clarikit.metrics import (
    evaluate_instance,
    indicator_embedder,
    match_facet_pairs,
    set_bleu,
    set_sim,
)
from clarikit.retrieval import (
    RetrievalConfig,
    ScoredDoc,
    bm25_retrieve,
    build_inverted_index,
    build_pool,
    mmr_rerank,
)
from test_retrieval import corpus_of


def criterion(number, description):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {number}] FAIL {description}")
                raise
            print(f"[criterion {number}] PASS {description}")

        return wrapper

    return decorate


VOCAB = ["alpha", "beta", "gamma", "delta", "omega", "cast", "zip", "code", "red", "blue"]


def random_facets(rng, max_facets=4):
    return [
        " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 3)))
        for _ in range(rng.randint(1, max_facets))
    ]


@criterion(1, "pair matching equals exhaustive search; metrics agree to 1e-12")
def test_criterion_1_metric_oracle_equivalence():
    rng = random.Random(20240601)
    started = time.perf_counter()
    for _ in range(1000):
        generated = random_facets(rng)
        truth = random_facets(rng)
        expected_pairs, expected_total, _ = brute_force_pairs(generated, truth)
        got = match_facet_pairs(generated, truth)
        assert tuple((g, t) for g, t, _ in got.pairs) == expected_pairs
        assert math.fsum(s for _, _, s in got.pairs) == expected_total

        mine = set_bleu(generated, truth)
        independent = set_bleu_from_pairs(generated, truth, expected_pairs)
        for a, b in zip(mine, independent):
            assert abs(a - b) <= 1e-12

        embedder = indicator_embedder(generated, truth)
        mine_sim = set_sim(generated, truth, embedder)
        other_sim = set_sim_from_pairs(generated, truth, expected_pairs, embedder)
        assert abs(mine_sim.precision - other_sim.precision) <= 1e-12
        assert abs(mine_sim.recall - other_sim.recall) <= 1e-12
        assert abs(mine_sim.f1 - other_sim.f1) <= 1e-12
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"criterion 1 took {elapsed:.1f}s (budget 10s)"


@criterion(2, "identity inputs score perfectly; short facets smooth below 1.0")
def test_criterion_2_identity_suite():
    rng = random.Random(7)
    for _ in range(50):
        facets = random_facets(rng)
        report = evaluate_instance(facets, list(facets))
        to, em = report.term_overlap, report.exact_match
        assert (to.precision, to.recall, to.f1) == (1.0, 1.0, 1.0)
        assert (em.precision, em.recall, em.f1) == (1.0, 1.0, 1.0)
        assert report.set_bleu[0] == 1.0

    # Facets shorter than 3 (resp. 4) tokens must score strictly below 1.0
    # at BLEU-3 (resp. BLEU-4); the identity direction, not exact values.
    two_tok = ["zip code", "red blue"]
    report = evaluate_instance(two_tok, list(two_tok))
    assert report.set_bleu[2] < 1.0
    assert report.set_bleu[3] < 1.0
    three_tok = ["alpha beta gamma"]
    report = evaluate_instance(three_tok, list(three_tok))
    assert report.set_bleu[2] == 1.0
    assert report.set_bleu[3] < 1.0


@criterion(3, "BM25 scores match hand evaluation of the formula to 1e-9")
def test_criterion_3_bm25_hand_check():
    index = build_inverted_index(
        corpus_of(
            {
                "d1": "cat sat on the mat",  # 5 tokens
                "d2": "cat cat scratched",  # 3 tokens
                "d3": "dog barked",  # 2 tokens
            }
        )
    )
    # Hand arithmetic, N=3, avgdl=10/3, k1=0.9, b=0.4, query "cat mat":
    #   idf(cat) = ln(1 + (3-2+0.5)/(2+0.5)) = ln(1.6)
    #   idf(mat) = ln(1 + (3-1+0.5)/(1+0.5)) = ln(8/3)
    #   d1 norm: tf + 0.9*(0.6 + 0.4*(5/(10/3))) = 1 + 0.9*1.2   = 2.08
    #   d2 norm: 2 + 0.9*(0.6 + 0.4*(3/(10/3)))  = 2 + 0.9*0.96  = 2.864
    expected_d1 = (math.log(1.6) + math.log(8 / 3)) * (1.0 * 1.9 / 2.08)
    expected_d2 = math.log(1.6) * (2.0 * 1.9 / 2.864)
    results = {r.doc_id: r.score for r in bm25_retrieve(index, "cat mat", k=3)}
    assert set(results) == {"d1", "d2"}
    assert abs(results["d1"] - expected_d1) <= 1e-9
    assert abs(results["d2"] - expected_d2) <= 1e-9

    # Single-doc sanity value: ln(4/3) with a unit tf term.
    single = build_inverted_index(corpus_of({"d": "cat sat"}))
    (hit,) = bm25_retrieve(single, "cat", k=1)
    assert abs(hit.score - 0.28768207245178085) <= 1e-9


@criterion(4, "MMR: lambda=1 is the relevance top-k; greedy equals brute force")
def test_criterion_4_mmr_properties():
    rng = random.Random(41)
    started = time.perf_counter()
    for _ in range(200):
        size = rng.randint(2, 30)
        scores = sorted((rng.random() * 10 for _ in range(size)), reverse=True)
        candidates = [ScoredDoc(f"d{i}", s, i + 1) for i, s in enumerate(scores)]
        k = rng.randint(1, size)
        out = mmr_rerank(candidates, 1.0, k, lambda a, b: rng.random())
        assert [d.doc_id for d in out] == [c.doc_id for c in candidates[:k]]

    matrix = [[1.0, 0.8, 0.1], [0.8, 1.0, 0.4], [0.1, 0.4, 1.0]]
    ids = ["x", "y", "z"]
    lookup = {doc: i for i, doc in enumerate(ids)}
    sim = lambda a, b: matrix[lookup[a]][lookup[b]]
    for scores in itertools.product([1.0, 2.0, 3.0], repeat=3):
        candidates = [ScoredDoc(ids[i], scores[i], i + 1) for i in range(3)]
        for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
            for k in (1, 2, 3):
                got = [d.doc_id for d in mmr_rerank(candidates, lam, k, sim)]
                assert got == brute_force_mmr(candidates, lam, k, sim)
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"criterion 4 took {elapsed:.1f}s (budget 5s)"


@pytest.fixture(scope="module")
def planted100():
    corpus, instances = make_planted(100)
    return {
        "corpus": corpus,
        "instances": instances,
        "index": build_inverted_index(corpus),
        "aligned": RetrievalConfig(mode="lexical", alignment="facet_aligned", k=5),
        "query_only": RetrievalConfig(mode="lexical", alignment="query_only", k=5),
    }


@criterion(5, "facet-aligned pools beat query-only exact-match recall by >= 0.3")
def test_criterion_5_alignment_direction(planted100):
    aligned = alignment_stats(
        planted100["instances"],
        lambda i: build_pool(planted100["aligned"], i, index=planted100["index"]),
        corpus=planted100["corpus"],
    )
    query_only = alignment_stats(
        planted100["instances"],
        lambda i: build_pool(planted100["query_only"], i, index=planted100["index"]),
        corpus=planted100["corpus"],
    )
    assert aligned.evaluated_count == 100
    assert query_only.evaluated_count == 100
    assert aligned.exact_match_recall >= query_only.exact_match_recall + 0.3, (
        f"aligned {aligned.exact_match_recall:.3f} vs "
        f"query-only {query_only.exact_match_recall:.3f}"
    )


@criterion(6, "LOO: extractive generator drops >= 50%; constant generator 0%")
def test_criterion_6_loo_faithfulness(planted100):
    common = dict(
        corpus=planted100["corpus"], index=planted100["index"], seed=2024
    )
    faithful = loo_faithfulness(
        planted100["instances"], extractive_generate, planted100["aligned"], **common
    )
    assert faithful.evaluated_count == 100
    assert faithful.delta_pct <= -50.0, f"delta {faithful.delta_pct:.2f}%"

    unfaithful = loo_faithfulness(
        planted100["instances"],
        constant_generator(planted100["instances"]),
        planted100["aligned"],
        **common,
    )
    assert unfaithful.delta_pct == 0.0

    rerun = loo_faithfulness(
        planted100["instances"], extractive_generate, planted100["aligned"], **common
    )
    assert json.dumps(rerun.to_dict(), sort_keys=True) == json.dumps(
        faithful.to_dict(), sort_keys=True
    )


@criterion(7, "round-robin fusion: dedup without backfill, cap, order preserved")
def test_criterion_7_round_robin_fusion():
    assert fuse_round_robin([["a", "b"], ["a", "c"]], 5) == ["a", "b", "c"]

    rng = random.Random(99)
    words = ["cast", "trailer", "quotes", "review", "zip", "code", "men", "women"]
    for _ in range(300):
        lists = [
            [rng.choice(words) for _ in range(rng.randint(0, 6))]
            for _ in range(rng.randint(1, 4))
        ]
        if not any(lists):
            continue
        fused = fuse_round_robin(lists, 5)
        assert len(fused) <= 5
        assert len(set(fused)) == len(fused)
        normalized = [[" ".join(normalize(f)) for f in lst] for lst in lists]
        assert fused == round_robin_oracle(normalized, 5)

    # Subsequence-order preservation, observable exactly on disjoint lists.
    for _ in range(100):
        lists = [
            [f"w{i}x{j}" for j in range(rng.randint(1, 5))]
            for i in range(rng.randint(1, 4))
        ]
        fused = fuse_round_robin(lists, 5)
        for lst in lists:
            members = [f for f in fused if f in lst]
            assert members == [f for f in lst if f in fused]


@criterion(8, "taxonomy bias fraction is exactly 0.200 on the planted set")
def test_criterion_8_taxonomy_exact_fraction():
    taxonomy_words = [f"tax{j:02d}" for j in range(20)]
    instances = [
        ClarificationInstance(id=f"biased{i}", query="q", facets=tuple(taxonomy_words))
        for i in range(20)
    ] + [
        ClarificationInstance(id=f"plain{i}", query="q", facets=(f"uniq{i}",))
        for i in range(80)
    ]
    report = taxonomy_analysis(instances, top_k=20)
    assert sorted(w for w, _ in report.top_words) == taxonomy_words
    assert report.biased_fraction == 0.200


@criterion(9, "experiment reruns are byte-identical across parallelism levels")
def test_criterion_9_experiment_determinism(tmp_path):
    corpus, instances = make_planted(20)
    corpus_path = tmp_path / "corpus.jsonl"
    corpus_path.write_text(
        "\n".join(json.dumps({"id": d.id, "text": d.text}) for d in corpus.docs) + "\n"
    )
    inst_path = tmp_path / "instances.jsonl"
    inst_path.write_text(
        "\n".join(
            json.dumps(
                {"id": i.id, "query": i.query, "question": None, "facets": list(i.facets)}
            )
            for i in instances
        )
        + "\n"
    )
    config_path = tmp_path / "config.json"
    config_path.write_text(
        json.dumps(
            {
                "corpus": str(corpus_path),
                "instances": str(inst_path),
                "embeddings": None,
                "retrieval": {"mode": "lexical", "alignment": "facet_aligned", "k": 5},
                "generator": {"kind": "extractive", "max_facets": 5},
                "seed": 31,
                "output_dir": str(tmp_path / "out"),
            }
        )
    )
    outputs = []
    for workers in ("1", "4", "2"):
        code = cli_main(
            ["experiment", "--config", str(config_path), "--parallelism", workers]
        )
        assert code == 0
        outputs.append(
            (
                (tmp_path / "out" / "summary.csv").read_bytes(),
                (tmp_path / "out" / "report.json").read_bytes(),
            )
        )
    assert outputs[0] == outputs[1] == outputs[2]
