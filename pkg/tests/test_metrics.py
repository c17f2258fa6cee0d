from __future__ import annotations

import math
import random
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import loo_expand, throwaway_bleu

from litforge.corpus import AlignmentRecord, Book, Corpus, Reference, SourceDocument
from litforge.metrics import (AdapterConfig, AdapterError, BleuConfig, MetricError, aggregate_scores,
                              bleu, corpus_report, external_metric, make_bleu, pairwise_average,
                              score_records_external, tokenize)

WORDS = "sea lamp night keeper ship storm light door window road snow horse winter wind".split()


def record(hums, gtr="g", doc_id="d", idx=0):
    return AlignmentRecord(doc_id, idx, "src", gtr, tuple(Reference(f"t{k}", h) for k, h in enumerate(hums)))


def corpus_of(records_by_lang):
    books = []
    for lang, recs in records_by_lang.items():
        doc = f"{lang}_book"
        recs = tuple(AlignmentRecord(doc, k, r.src, r.gtr, r.hums) for k, r in enumerate(recs))
        books.append(Book(SourceDocument(doc, lang, "", "", 1900, ("p",) * max(1, len(recs))), records=recs))
    return Corpus(tuple(books))


# -- BLEU ---------------------------------------------------------------------------

def test_identity_is_100():
    assert bleu("The keeper climbed the stairs.", ["The keeper climbed the stairs."]) == pytest.approx(100.0)


def test_hand_vector_one_mismatch():
    # p = 4/5, 3/4, 2/3, 1/2; geometric mean 0.2 ** 0.25; BP = 1.
    assert 100 * 0.2 ** 0.25 == pytest.approx(66.87, abs=0.01)
    assert bleu("a b c d e", ["a b c d f"]) == pytest.approx(66.87, abs=0.01)
    assert bleu("a b c d e", ["a b c d f"]) == pytest.approx(throwaway_bleu("a b c d e", ["a b c d f"]), abs=1e-9)


def test_hand_vector_brevity_dominated():
    # BP = exp(1 - 4/1) = e^-3. A one-token hypothesis has only unigrams, and p1 = 1.
    hand = 100 * math.exp(-3)
    assert bleu("a", ["a b c d"]) == pytest.approx(hand, abs=1e-9)
    assert bleu("a", ["a b c d"]) < 5
    assert bleu("a", ["a b c d"]) == pytest.approx(throwaway_bleu("a", ["a b c d"]), abs=0.01)


def test_short_hypothesis_identity():
    assert bleu("Yes.", ["Yes."]) == pytest.approx(100.0)
    assert bleu("sea", ["sea"]) == pytest.approx(100.0)


def test_zero_matches_smoothed_over_candidate_total():
    # p1 = 3/4, p2 = 1/3, p3 = 0.1/2, p4 = 0.1/1
    hand = 100 * (0.75 * (1 / 3) * 0.05 * 0.1) ** 0.25
    assert bleu("a b x c", ["a b c d"]) == pytest.approx(hand, abs=1e-9)


def test_strict_bleu_collapses_without_smoothing():
    assert bleu("a b c x", ["a b c d"], BleuConfig(smoothing="none")) == 0.0


def test_reference_length_closest_ties_shorter():
    # c = 3; refs of length 2 and 4 are equally close, so r = 2 and BP = 1.
    assert bleu("a b c", ["a b", "a b c d"]) == pytest.approx(throwaway_bleu("a b c", ["a b", "a b c d"]))


def test_tokenizer_splits_edge_punctuation():
    assert tokenize('"Well," he said.') == ['"', "Well", ",", '"', "he", "said", "."]
    assert tokenize("don't stop...") == ["don't", "stop", ".", ".", "."]
    assert tokenize("Hello", BleuConfig(case_sensitive=False)) == ["hello"]


def test_bleu_errors():
    with pytest.raises(MetricError, match="empty reference set"):
        bleu("a", [])
    with pytest.raises(ValueError):
        BleuConfig(max_ngram_order=0)


sentence = st.lists(st.sampled_from(WORDS), min_size=1, max_size=12).map(" ".join)


@settings(max_examples=150, deadline=None)
@given(sentence, st.lists(sentence, min_size=1, max_size=4))
def test_bleu_properties(hyp, refs):
    score = bleu(hyp, refs)
    assert 0.0 <= score <= 100.0 + 1e-9
    assert score == pytest.approx(throwaway_bleu(hyp, refs), rel=1e-9, abs=1e-9)
    assert bleu(hyp, list(reversed(refs))) == score
    assert bleu(hyp, [hyp]) == pytest.approx(100.0)


# -- aggregation ----------------------------------------------------------------------

def test_all_identical_gives_100():
    agg = aggregate_scores(record(["the sea", "the sea"], gtr="the sea"), make_bleu())
    assert agg.s_hum == pytest.approx(100.0) and agg.s_cand == pytest.approx(100.0)


def test_two_reference_expansion():
    h1, h2, g = "the night was cold and dark", "the night was dark", "a cold night"
    m = make_bleu()
    agg = aggregate_scores(record([h1, h2], gtr=g), m)
    assert agg.s_hum == pytest.approx((m(h1, [h2]) + m(h2, [h1])) / 2, abs=1e-12)
    assert agg.s_cand == pytest.approx((m(g, [h2]) + m(g, [h1])) / 2, abs=1e-12)


def test_three_reference_oracle():
    hums = ["the keeper lit the lamp at dusk", "at dusk the keeper lit his lamp", "the lamp was lit by the keeper"]
    gtr = "the guardian lit the lamp in the evening"
    agg = aggregate_scores(record(hums, gtr), make_bleu())
    s_hum, s_cand = loo_expand(hums, gtr, throwaway_bleu)
    assert agg.s_hum == pytest.approx(s_hum, abs=1e-9)
    assert agg.s_cand == pytest.approx(s_cand, abs=1e-9)


def test_aggregation_needs_two_references():
    with pytest.raises(MetricError, match="aggregation undefined"):
        aggregate_scores(record(["only one"]), make_bleu())


def test_human_and_candidate_see_identical_reference_sets():
    seen = {"hum": [], "cand": []}
    gtr = "machine text"

    def spy(hyp, refs):
        seen["cand" if hyp == gtr else "hum"].append(tuple(refs))
        return 1.0

    aggregate_scores(record(["h one", "h two", "h three"], gtr), spy)
    assert seen["hum"] == seen["cand"]


def test_pairwise_average_constant_and_expansion():
    agg = pairwise_average(record(["x", "y", "z"]), lambda h, r: 0.5)
    assert (agg.s_hum, agg.s_cand) == (0.5, 0.5)
    table = {("x", "y"): 0.2, ("y", "x"): 0.6, ("g", "x"): 0.1, ("g", "y"): 0.3}
    agg = pairwise_average(record(["x", "y"], "g"), lambda h, r: table[(h, r)])
    assert agg.s_hum == pytest.approx((0.2 + 0.6) / 2)
    assert agg.s_cand == pytest.approx((0.3 + 0.1) / 2)


def test_pairwise_average_random_oracle():
    rng = random.Random(3)
    hums = ["p", "q", "r"]
    table = {(a, b): rng.random() for a in hums + ["g"] for b in hums}
    agg = pairwise_average(record(hums, "g"), lambda h, r: table[(h, r)])
    s_hum, s_cand = loo_expand(hums, "g", lambda h, refs: sum(table[(h, r)] for r in refs) / len(refs))
    assert agg.s_hum == pytest.approx(s_hum, abs=1e-12)
    assert agg.s_cand == pytest.approx(s_cand, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(sentence, min_size=2, max_size=4), sentence, st.randoms(use_true_random=False))
def test_aggregation_permutation_invariant(hums, gtr, rnd):
    shuffled = list(hums)
    rnd.shuffle(shuffled)
    a = aggregate_scores(record(hums, gtr), make_bleu())
    b = aggregate_scores(record(shuffled, gtr), make_bleu())
    assert (a.s_hum, a.s_cand) == (b.s_hum, b.s_cand)


def test_monotone_corruption_property():
    rng = random.Random(11)
    improved = 0
    trials = 200
    for _ in range(trials):
        base = [rng.choice(WORDS) for _ in range(rng.randint(8, 16))]
        hums = [" ".join(w if rng.random() > 0.2 else rng.choice(WORDS) for w in base) for _ in range(3)]
        gtr = " ".join(w for w in base if rng.random() > 0.3) or base[0]
        before = aggregate_scores(record(hums, gtr), make_bleu()).s_cand
        after = aggregate_scores(record(hums, hums[0]), make_bleu()).s_cand
        improved += after >= before
    assert improved / trials >= 0.95


# -- corpus report --------------------------------------------------------------------

def test_all_identical_corpus_is_all_ties():
    report = corpus_report(corpus_of({"fr": [record(["a b", "a b"], "a b")] * 3}), make_bleu())
    row = report.rows[0]
    assert (row.win_hum, row.win_cand, row.ties) == (0, 0, 3)
    assert row.win_hum_pct is None and row.win_cand_pct is None
    assert "\tNA\tNA\n" in report.to_tsv()


def test_five_record_hand_table():
    # Scores chosen by hand; the metric looks them up by hypothesis text.
    pairs = {"fr": [(60, 40), (30, 50), (45, 45)], "de": [(80, 20), (10, 90)]}
    recs = {}
    table = {}
    for lang, rows in pairs.items():
        recs[lang] = []
        for k, (h, c) in enumerate(rows):
            hum = [f"{lang}{k}a", f"{lang}{k}b"]
            gtr = f"{lang}{k}g"
            table.update({hum[0]: h, hum[1]: h, gtr: c})
            recs[lang].append(record(hum, gtr))
    report = corpus_report(corpus_of(recs), lambda hyp, refs: table[hyp])
    by_lang = {r.language: r for r in report.rows}
    fr, de, overall = by_lang["fr"], by_lang["de"], report.overall
    assert (fr.mean_hum, fr.mean_cand) == (45.0, 45.0)
    assert (fr.win_hum, fr.win_cand, fr.ties, fr.win_hum_pct) == (1, 1, 1, 50.0)
    assert (de.mean_hum, de.mean_cand, de.win_hum_pct) == (45.0, 55.0, 50.0)
    assert (overall.records, overall.win_hum, overall.win_cand, overall.ties) == (5, 2, 2, 1)
    assert overall.mean_hum == pytest.approx(45.0)
    assert overall.mean_cand == pytest.approx(49.0)
    lines = report.to_tsv().splitlines()
    assert lines[0].startswith("metric\tlanguage\trecords")
    assert lines[-1].split("\t")[1:4] == ["All", "5", "45.0000"]


def test_word_dropped_corruption_prefers_humans():
    rng = random.Random(5)
    recs = []
    for _ in range(200):
        base = [rng.choice(WORDS) for _ in range(14)]
        hums = [" ".join(w if rng.random() > 0.1 else rng.choice(WORDS) for w in base) for _ in range(3)]
        gtr = " ".join(w for w in hums[0].split() if rng.random() > 0.4)
        recs.append(record(hums, gtr or base[0]))
    report = corpus_report(corpus_of({"fr": recs}), make_bleu())
    assert report.overall.win_hum_pct > 50


# -- external adapters -------------------------------------------------------------------

STUB = """
import json, sys
for line in sys.stdin:
    obj = json.loads(line)
    score = {score}
    print(json.dumps({{"id": obj["id"], "score": score}}))
"""


def stub_adapter(tmp_path, score_expr="0.5", name="stub.py"):
    path = tmp_path / name
    path.write_text(STUB.format(score=score_expr))
    return AdapterConfig(argv=(sys.executable, str(path)))


def test_echo_adapter_constant_scores(tmp_path):
    out = external_metric([("a", "b"), ("c", "d"), ("e", "f")], stub_adapter(tmp_path))
    assert out.scores == [0.5, 0.5, 0.5]
    assert out.skipped == []


def test_adapter_order_preserved(tmp_path):
    cfg = stub_adapter(tmp_path, "len(obj['hyp'])")
    out = external_metric([("aaa", "x"), ("a", "x"), ("aa", "x")], cfg)
    assert out.scores == [3.0, 1.0, 2.0]


def test_over_length_pair_skipped(tmp_path):
    cfg = AdapterConfig(argv=stub_adapter(tmp_path).argv, max_length=5)
    out = external_metric([("one two", "three"), ("a b c", "d e f")], cfg)
    assert out.scores == [0.5, None]
    assert out.skipped == [1]


def test_adapter_failure_reports_partial(tmp_path):
    path = tmp_path / "bad.py"
    path.write_text("import sys, json\nline = sys.stdin.readline()\n"
                    "print(json.dumps({'id': json.loads(line)['id'], 'score': 1.0}))\nsys.exit(3)\n")
    with pytest.raises(AdapterError) as exc:
        external_metric([("a", "b"), ("c", "d")], AdapterConfig(argv=(sys.executable, str(path))))
    assert exc.value.partial_results is True
    assert exc.value.partial[:1] == [1.0]


def test_records_scored_through_adapter(tmp_path):
    cfg = stub_adapter(tmp_path, "float(obj['hyp'] == obj['ref'])")
    recs = [record(["same", "same", "other"], "same", idx=0), record(["x", "y"], "x", idx=1)]
    scores = score_records_external(recs, cfg, "stub")
    table = lambda h, r: float(h == r)  # noqa: E731
    for rec in recs:
        expected = pairwise_average(rec, table)
        got = scores[(rec.doc_id, rec.source_index)]
        assert (got.s_hum, got.s_cand) == pytest.approx((expected.s_hum, expected.s_cand))
