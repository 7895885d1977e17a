import itertools
import logging
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ward.errors import ConfigurationError, EmptyIndexError, ValidationError
from ward.evaluation import (
    EXTERNAL_METRICS,
    NATIVE_METRICS,
    REPORT_COLUMNS,
    ExternalScorer,
    MetricReport,
    bleu4,
    count_chunks,
    lcs_length,
    meteor,
    meteor_alignment,
    meteor_from_tokens,
    rank_sections,
    section_scores,
    report_row,
    report_table,
    rouge,
    run_baseline,
    score_corpus,
    score_record,
    tokenize,
)
from ward.retrieval import HashingEmbedder, RetrievalIndex, TaskContextSpec, build_index
from ward.segmenter import BHC, DI, segment
from ward.stub import StubOptions, StubServer

EMB = HashingEmbedder()


# -- oracles ------------------------------------------------------------------------


def lcs_dp(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            t[i + 1][j + 1] = t[i][j] + 1 if x == y else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


def meteor_brute(hyp, ref):
    """Try every one-to-one exact matching; keep max matches, then min chunks."""
    if not hyp or not ref:
        return 0.0
    best = (0, 0)  # (matches, -chunks)

    def walk(i, used, pairs):
        nonlocal best
        if i == len(hyp):
            if pairs:
                key = (len(pairs), -count_chunks(pairs))
                best = max(best, key)
            return
        walk(i + 1, used, pairs)
        for j, tok in enumerate(ref):
            if tok == hyp[i] and j not in used:
                walk(i + 1, used | {j}, pairs + [(i, j)])

    walk(0, frozenset(), [])
    m, neg_chunks = best
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    return 10 * p * r / (r + 9 * p) * (1 - 0.5 * (-neg_chunks / m) ** 3)


# -- examples -----------------------------------------------------------------------


def test_tokenizer_splits_punctuation_and_lowercases():
    assert tokenize("Pt. NPO, then PO!") == ["pt", ".", "npo", ",", "then", "po", "!"]


def test_bleu_examples():
    s = "one two three four five six seven eight nine ten"
    assert bleu4(s, s) == 1.0
    assert bleu4("the cat sat on", "the cat sat on the mat") == pytest.approx(math.exp(1 - 6 / 4), abs=1e-12)
    assert abs(bleu4("the cat sat on", "the cat sat on the mat") - 0.606531) <= 1e-6
    assert bleu4("alpha beta gamma delta", "one two three four") == 0.0
    assert bleu4("", "x y z w") == 0.0
    with pytest.raises(ConfigurationError):
        bleu4("a", "a", smoothing="add1")


def test_bleu_epsilon_smoothing_is_positive():
    # four tokens, no shared bigram
    assert bleu4("a x b y", "a b c d") == 0.0
    assert 0.0 < bleu4("a x b y", "a b c d", smoothing="epsilon") < 1e-3


def test_bleu_known_asymmetric_pair():
    a, b = "the cat sat on", "the cat sat on the mat"
    assert bleu4(a, b) != pytest.approx(bleu4(b, a))
    # reversed: longer hypothesis, BP = 1, clipped precisions 4/6, 3/5, 2/4, 1/3
    assert bleu4(b, a) == pytest.approx((4 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25, abs=1e-12)


def test_rouge_examples():
    assert abs(rouge("the cat", "the dog", "rouge1") - 0.5) <= 1e-9
    assert abs(rouge("the cat sat", "the sat cat", "rougeL") - 2 / 3) <= 1e-9
    s = "patient admitted with chest pain and ruled out"
    assert {rouge(s, s, v) for v in ("rouge1", "rouge2", "rougeL")} == {1.0}
    assert rouge("", "x", "rouge1") == 0.0
    with pytest.raises(ConfigurationError):
        rouge("a", "a", "rouge3")


def test_rougel_recall_weighting():
    # P = 2/3, R = 2/4
    p, r = 2 / 3, 2 / 4
    for beta in (1.0, 1.2, 3.0):
        want = (1 + beta**2) * p * r / (r + beta**2 * p)
        assert rouge("a b c", "a x b y", "rougeL", beta=beta) == pytest.approx(want, abs=1e-12)


def test_meteor_examples():
    assert meteor("a b c d", "a b c d") == 0.9921875
    assert meteor("the cat", "cat the") == 0.5
    assert meteor("x y", "p q") == 0.0


def test_meteor_prefers_fewer_chunks():
    # "a b" can align as one chunk to the second occurrence
    pairs = meteor_alignment(["a", "b"], ["a", "x", "a", "b"])
    assert sorted(pairs) == [(0, 2), (1, 3)] and count_chunks(pairs) == 1


def test_metric_oracles_are_fast():
    import time

    t0 = time.perf_counter()
    bleu4("the cat sat on", "the cat sat on the mat")
    rouge("the cat", "the dog", "rouge1")
    rouge("the cat sat", "the sat cat", "rougeL")
    meteor("a b c d", "a b c d")
    meteor("the cat", "cat the")
    assert time.perf_counter() - t0 < 1.0


# -- properties ---------------------------------------------------------------------

small_tokens = st.lists(st.sampled_from("abcd"), max_size=7)
words = st.lists(st.sampled_from(["the", "cat", "sat", "on", "mat", "dog", ".", ","]), max_size=40).map(" ".join)


@settings(max_examples=300, deadline=None)
@given(small_tokens, small_tokens)
def test_lcs_matches_dp(a, b):
    assert lcs_length(a, b) == lcs_dp(a, b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcdefgh"), max_size=300), st.lists(st.sampled_from("abcdefgh"), max_size=300))
def test_lcs_matches_dp_long(a, b):
    assert lcs_length(a, b) == lcs_dp(a, b)


@settings(max_examples=300, deadline=None)
@given(small_tokens, small_tokens)
def test_meteor_matches_brute_force(a, b):
    assert meteor_from_tokens(a, b) == pytest.approx(meteor_brute(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("ab"), min_size=20, max_size=60), st.lists(st.sampled_from("ab"), min_size=20, max_size=60))
def test_meteor_large_alignment_keeps_max_matches(a, b):
    pairs = meteor_alignment(a, b)
    assert len(pairs) == sum(min(a.count(t), b.count(t)) for t in "ab")
    assert len({h for h, _ in pairs}) == len(pairs) == len({r for _, r in pairs})
    assert all(a[h] == b[r] for h, r in pairs)
    assert 0.0 <= meteor_from_tokens(a, b) <= 1.0


@settings(max_examples=300, deadline=None)
@given(words, words)
def test_metrics_in_unit_interval_and_rouge1_symmetric(h, r):
    for name, v in score_record(h, r).scores.items():
        assert 0.0 <= v <= 1.0, name
    assert rouge(h, r, "rouge1") == pytest.approx(rouge(r, h, "rouge1"), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["alpha", "beta", "gamma", "delta", "."]), min_size=4, max_size=30).map(" ".join))
def test_identity_scores(x):
    m = len(tokenize(x))
    assert bleu4(x, x) == pytest.approx(1.0, abs=1e-12)
    for v in ("rouge1", "rouge2", "rougeL"):
        assert rouge(x, x, v) == pytest.approx(1.0, abs=1e-12)
    assert meteor(x, x) == pytest.approx(1 - 0.5 / m**3, abs=1e-12)


# -- reports ------------------------------------------------------------------------


def test_identity_record_report():
    s = "patient was admitted with chest pain and discharged home"
    rep = score_record(s, s)
    assert set(rep.scores) == set(NATIVE_METRICS)
    assert all(rep.scores[m] == 1.0 for m in NATIVE_METRICS if m != "meteor")
    assert rep.scores["meteor"] >= 0.99
    assert rep.missing == EXTERNAL_METRICS
    assert abs(rep.overall - math.fsum(rep.scores.values()) / 5) <= 1e-12


def test_external_scorer_merged_and_failure_tolerated(caplog):
    with StubServer(options=StubOptions(score=0.5)) as s:
        scorers = [ExternalScorer("bertscore", s.url), ExternalScorer("align", "http://127.0.0.1:1", attempts=1)]
        with caplog.at_level(logging.WARNING, logger="ward.evaluation"):
            rep = score_record("a b c", "a b d", scorers)
        assert s.requests[0] == ("/score", {"hypothesis": "a b c", "reference": "a b d"})
    assert rep.scores["bertscore"] == 0.5 and len(rep.scores) == 6
    assert rep.missing == ("align", "medcon")
    assert rep.overall == pytest.approx(math.fsum(rep.scores.values()) / 6, abs=1e-12)
    assert "align" in caplog.text


def test_metric_report_invariants():
    with pytest.raises(ValidationError):
        MetricReport({"bleu": 1.2})
    with pytest.raises(ValidationError):
        MetricReport({"bleu": 0.2}, missing=("bleu",))


def test_overall_recompute_on_random_reports():
    rng = random.Random(5)
    names = list(REPORT_COLUMNS[:-1])
    for _ in range(1000):
        keys = rng.sample(names, rng.randint(1, len(names)))
        scores = {k: rng.random() for k in keys}
        rep = MetricReport(scores, tuple(k for k in names if k not in keys))
        assert abs(rep.overall - sum(scores.values()) / len(scores)) <= 1e-12


def test_score_corpus_requires_every_prediction():
    with pytest.raises(ValidationError, match="no prediction"):
        score_corpus({"1": "a"}, {"1": "a", "2": "b"})


def test_score_corpus_parallel_matches_serial(synth50, letters50):
    gold = {h: l.sections[BHC] for h, l in letters50.items()}
    preds = {h: " ".join(t.split()[::2]) for h, t in gold.items()}
    a = score_corpus(preds, gold, "bhc", concurrency=1)
    b = score_corpus(preds, gold, "bhc", concurrency=4)
    assert a.means == b.means and a.n == 50
    for m, v in a.means.items():
        assert v == pytest.approx(math.fsum(r.scores[m] for r in a.per_record.values()) / 50, abs=1e-12)
    d = a.to_dict()
    assert d["aggregation"] == "mean-of-scores" and d["missing"] == list(EXTERNAL_METRICS)


def test_report_table_column_order():
    rep = score_corpus({"1": "a b c d e"}, {"1": "a b c d e"})
    text = report_table([("identity", report_row(rep))])
    header = text.splitlines()[0].split()
    assert header == ["method", *REPORT_COLUMNS]
    row = text.splitlines()[1].split()
    assert row[0] == "identity" and row[header.index("bertscore")] == "-"


# -- section ranking ----------------------------------------------------------------


def planted(letters, target, section):
    return {h: l.with_section(section, l.sections[target]) for h, l in letters.items()}


@pytest.mark.parametrize("task,target", [("BHC", BHC), ("DI", DI)])
@pytest.mark.parametrize("section", ["allergies", "social_history", "pertinent_results"])
def test_planted_section_ranks_first_under_every_subset(letters50, task, target, section):
    letters = planted(letters50, target, section)
    scores = section_scores(letters, task)
    for k in range(1, len(NATIVE_METRICS) + 1):
        for subset in itertools.combinations(NATIVE_METRICS, k):
            assert scores.rank(subset).rank_of(section) == 1, subset
    assert rank_sections(letters, task, ["rouge2"]).rank_of(section) == 1


def test_rank_from_scores_matches_direct(letters50):
    scores = section_scores(letters50, "BHC", ["bleu", "rouge1"])
    assert scores.rank(["rouge1"]) == rank_sections(letters50, "BHC", ["rouge1"])
    with pytest.raises(ValidationError):
        scores.rank(["meteor"])


def test_ranking_table_invariants(letters50):
    table = rank_sections(letters50, "BHC")
    ranks = [r.final_rank for r in table.rows]
    assert sorted(ranks) == list(range(1, len(ranks) + 1))
    assert BHC not in {r.section_name for r in table.rows}
    keys = [(r.avg_rank, r.section_name) for r in table.rows]
    assert keys == sorted(keys)
    assert "avg_rank" in table.to_text()


def test_identical_candidates_tie_lexicographically(letters50):
    letters = {h: l.with_section("family_history", "same text").with_section("allergies", "same text") for h, l in letters50.items()}
    table = rank_sections(letters, "BHC", candidates=["family_history", "allergies", "chief_complaint"])
    rows = {r.section_name: r for r in table.rows}
    assert rows["allergies"].avg_rank == rows["family_history"].avg_rank
    assert rows["allergies"].final_rank + 1 == rows["family_history"].final_rank


def test_missing_candidate_scores_zero():
    letters = {
        "1": segment("Chief Complaint:\npain\nBrief Hospital Course:\npain resolved\n"),
        "2": segment("Allergies:\npain\nBrief Hospital Course:\npain resolved\n"),
    }
    table = rank_sections(letters, "BHC", ["rouge1"], candidates=["chief_complaint", "allergies"])
    for row in table.rows:
        assert row.per_metric_mean["rouge1"] == pytest.approx(rouge("pain", "pain resolved", "rouge1") / 2)


def test_ranking_errors(letters50):
    with pytest.raises(ValidationError):
        rank_sections({"1": segment("Chief Complaint:\nx\n")}, "BHC")
    with pytest.raises(ValidationError):
        rank_sections(letters50, "BHC", ["bertscore"])
    with pytest.raises(ValidationError):
        rank_sections(letters50, "BHC", candidates=["allergies"])


@settings(max_examples=50, deadline=None)
@given(st.randoms(use_true_random=False))
def test_ranking_invariant_to_record_order(letters50, rnd):
    items = sorted(letters50.items())[:12]
    base = rank_sections(dict(items), "DI", ["rouge1", "meteor"]).to_dict()
    rnd.shuffle(items)
    assert rank_sections(dict(items), "DI", ["rouge1", "meteor"]).to_dict() == base


# -- baselines ----------------------------------------------------------------------


def test_random_shuffle_is_seeded_bijection(synth50, letters50):
    gold = {h: l.sections[BHC] for h, l in letters50.items()}
    a = run_baseline("random_shuffle", synth50.corpus, "BHC", seed=3, letters=letters50)
    b = run_baseline("random_shuffle", synth50.corpus, "BHC", seed=3, letters=letters50)
    c = run_baseline("random_shuffle", synth50.corpus, "BHC", seed=4, letters=letters50)
    assert a == b and a != c
    assert set(a) == set(gold)
    assert sorted(a.values()) == sorted(gold.values())


def twin_setup(sc):
    letters = {r.hadm_id: segment(r.text) for r in sc.corpus}
    idx = build_index(sc.corpus, TaskContextSpec.default("BHC"), EMB, letters)
    return letters, idx


def test_retrieved_target_gives_twin_sibling_gold(twins200):
    letters, idx = twin_setup(twins200)
    preds = run_baseline("retrieved_target", twins200.corpus, "BHC", index=idx, letters=letters, provider=EMB)
    recs = twins200.corpus.records
    for a, b in zip(recs[0::2], recs[1::2]):
        assert preds[a.hadm_id] == letters[b.hadm_id].sections[BHC]
        assert preds[b.hadm_id] == letters[a.hadm_id].sections[BHC]


def test_retrieved_beats_shuffle_on_twins(twins200):
    letters, idx = twin_setup(twins200)
    gold = {h: l.sections[BHC] for h, l in letters.items()}
    ret = run_baseline("retrieved_target", twins200.corpus, "BHC", index=idx, letters=letters, provider=EMB)
    shuf = run_baseline("random_shuffle", twins200.corpus, "BHC", seed=0, letters=letters)
    r1, r2 = score_corpus(ret, gold), score_corpus(shuf, gold)
    assert r1.means["rouge1"] > r2.means["rouge1"]
    assert r1.means["meteor"] > r2.means["meteor"]


def test_retrieved_target_requires_index(synth50, letters50):
    for idx in (None, RetrievalIndex.from_entries([])):
        with pytest.raises(EmptyIndexError):
            run_baseline("retrieved_target", synth50.corpus, "BHC", index=idx, letters=letters50, provider=EMB)


def test_generation_baselines_delegate(synth50, letters50):
    calls = []

    def fake(strategy, words):
        calls.append((strategy, words))
        return {h: f"{strategy} {words}" for h in letters50}

    fw = run_baseline("fixed_word", synth50.corpus, "BHC", fixed_words="300", letters=letters50, generate=fake)
    pl = run_baseline("pipeline", synth50.corpus, "BHC", fixed_words="300", letters=letters50, generate=fake)
    assert calls == [("fixed", "300"), ("retrieved", None)]
    assert set(fw) == set(pl) == set(letters50)
    with pytest.raises(ConfigurationError):
        run_baseline("pipeline", synth50.corpus, "BHC", letters=letters50)
    with pytest.raises(ConfigurationError):
        run_baseline("oracle", synth50.corpus, "BHC", letters=letters50)
