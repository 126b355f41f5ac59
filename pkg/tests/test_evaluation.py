import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argen.errors import ConfigError, DataError
from argen.evaluation import (
    EvalReport,
    RelevanceConfig,
    RelevanceModel,
    SystemScores,
    approximate_randomization,
    bleu2,
    generic_response_rate,
    jaccard_distance,
    keyphrase_reuse,
    meteor_lite,
    mrr_p1,
    relevance_rank,
    sample_negatives,
    score_system,
    select_distractors,
    stem,
    sweep_table,
    train_relevance,
)
from argen.keyphrase import GoldKeyphraseSeq
from argen.text import PHRASE, load_phrase_list

S = str.split

# -- BLEU-2 -----------------------------------------------------------------


def oracle_bleu2(cand, ref):
    """Textbook formula written out independently."""
    precisions = []
    for n in (1, 2):
        grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
        rgrams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
        if not grams:
            continue
        used = Counter()
        hit = 0
        for g in grams:
            if used[g] < rgrams[g]:
                used[g] += 1
                hit += 1
        precisions.append(hit / len(grams))
    if min(precisions) == 0:
        return 0.0
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.prod(precisions) ** (1 / len(precisions))


def test_bleu_identical():
    assert bleu2(S("a b c d"), [S("a b c d")]) == 1.0


def test_bleu_no_bigram_overlap():
    assert bleu2(S("a b c"), [S("c b a")]) == 0.0


def test_bleu_hand_value():
    # p1 = p2 = 1, brevity penalty exp(1 - 4/3)
    assert bleu2(S("the cat sat"), [S("the cat sat down")]) == pytest.approx(math.exp(1 - 4 / 3), abs=1e-12)


def test_bleu_clipping():
    # unigram "the" clipped to 2 of 4, bigram "the the" clipped to 1 of 3
    assert bleu2(S("the the the the"), [S("the the cat")]) == pytest.approx(math.sqrt(0.5 * (1 / 3)), abs=1e-12)


def test_bleu_best_of_references():
    refs = [S("x y z"), S("the cat sat")]
    assert bleu2(S("the cat sat"), refs) == 1.0


def test_bleu_errors():
    with pytest.raises(DataError):
        bleu2([], [S("a")])
    with pytest.raises(DataError):
        bleu2(S("a"), [])


words = st.lists(st.sampled_from(S("a b c d e f")), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(words, words, words)
def test_bleu_properties(c, r1, r2):
    b = bleu2(c, [r1])
    assert 0.0 <= b <= 1.0 + 1e-12
    assert b == pytest.approx(oracle_bleu2(c, r1), abs=1e-12)
    assert bleu2(c, [r1, r2]) >= b
    assert bleu2(c, [c]) == pytest.approx(1.0)


# -- METEOR-lite ---------------------------------------------------------------


def test_stemmer():
    assert stem("runs") == stem("running") == stem("run")
    assert stem("hoping") == stem("hope")
    assert stem("studies") == stem("study")
    assert stem("boxes") == "box"
    assert stem("is") == "is"


def test_meteor_identical_is_one():
    assert meteor_lite(S("the cat sat on the mat"), [S("the cat sat on the mat")]) == 1.0


def test_meteor_disjoint_is_zero():
    assert meteor_lite(S("a b"), [S("c d")]) == 0.0


def test_meteor_stem_match():
    # one stem match, P = R = 1, single chunk, no penalty
    assert meteor_lite(["runs"], [["running"]]) == pytest.approx(1.0, abs=1e-12)


def test_meteor_hand_fragmented():
    # matches a, b, d of four candidate tokens against five reference tokens
    cand, ref = S("a x b d"), S("a b q r d")
    p, r = 3 / 4, 3 / 5
    fmean = 10 * p * r / (r + 9 * p)
    # alignment a-a, b-b, d-d: chunks {a}, {b}, {d} since positions break
    pen = 0.5 * (3 / 3) ** 3
    assert meteor_lite(cand, [ref]) == pytest.approx(fmean * (1 - pen), abs=1e-12)


def test_meteor_errors():
    with pytest.raises(DataError):
        meteor_lite([], [S("a")])
    with pytest.raises(DataError):
        meteor_lite(S("a"), [])


# -- generic responses and keyphrases -----------------------------------------


def test_generic_rate():
    generic = [S("i disagree"), S("this is not true")]
    outs = [S("i disagree"), S("well this is not true at all"), S("the law says so")]
    assert generic_response_rate(outs, generic) == pytest.approx(2 / 3)
    assert generic_response_rate([S("no match here")], generic) == 0.0
    with pytest.raises(ConfigError):
        generic_response_rate(outs, [])


def test_generic_rate_ten_outputs():
    generic = [S("i disagree")]
    outs = [S("i disagree with that")] * 4 + [S("i do not disagree")] * 6
    assert generic_response_rate(outs, generic) == 0.4


def test_shipped_generic_list():
    phrases = load_phrase_list()
    assert len(phrases) == 29
    assert S("i don't agree with you") in [list(p) for p in phrases]


def test_keyphrase_reuse():
    gold = GoldKeyphraseSeq.from_phrases([S("free speech"), S("the law")])
    assert keyphrase_reuse(gold, gold, S("x")) == (1.0, 0.0)
    gen = S("free speech") + [PHRASE] + S("tax cuts")
    assert keyphrase_reuse(gen, gold, S("we need tax cuts now")) == (0.5, 0.5)
    assert keyphrase_reuse([], gold, S("x")) == (0.0, 0.0)


# -- ranking ------------------------------------------------------------------


def test_mrr_arithmetic():
    assert mrr_p1([1, 1, 1]) == (1.0, 1.0)
    assert mrr_p1([1, 2]) == (0.75, 0.5)


def test_uniform_random_ranker_mrr():
    rng = np.random.default_rng(0)
    ranks = rng.integers(1, 7, size=10_000)
    expect = sum(1 / r for r in range(1, 7)) / 6
    var = sum((1 / r - expect) ** 2 for r in range(1, 7)) / 6
    mrr, _ = mrr_p1(ranks)
    assert abs(mrr - expect) < 3 * math.sqrt(var / 10_000)


class FixedScores:
    def __init__(self, table):
        self.table = table

    def score(self, ops, args):
        return np.array([self.table[tuple(a)] for a in args])


def test_rank_ties_are_pessimistic():
    m = FixedScores({("a",): 0.5, ("b",): 0.5, ("c",): 0.1})
    assert relevance_rank(m, ["x"], ["a"], [["b"], ["c"]]) == 2
    assert relevance_rank(m, ["x"], ["a"], [["c"]]) == 1


def test_jaccard():
    assert jaccard_distance("ab", "ab") == 0.0
    assert jaccard_distance("ab", "cd") == 1.0
    assert jaccard_distance("abc", "bcd") == pytest.approx(0.5)


def test_negatives_from_other_threads():
    pairs = [("t0", [1], [1, 2]), ("t0", [1], [1, 2, 3]), ("t1", [4], [1, 2]), ("t2", [5], [7, 8]), ("t3", [6], [9])]
    negs = sample_negatives(0, pairs, np.random.default_rng(0), samples=100, keep=2)
    assert set(negs) == {3, 4}
    assert sample_negatives(0, pairs, np.random.default_rng(0), keep=5) != []


def test_select_distractors_by_evidence():
    ev = [S("tax tax rate"), S("tax rate cut"), S("dog cat"), S("cat bird"), S("tax income")]
    d = select_distractors(ev, n=2)
    assert d[0][0] in (1, 4)
    assert 2 not in d[0][:1]
    assert all(i not in row for i, row in enumerate(d))


def clustered_dataset(topics=8, per=30, n=160, seed=0):
    rng = np.random.default_rng(seed)
    vocab = 7 + topics * per
    emb = rng.normal(scale=0.5, size=(vocab, 32))
    centers = rng.normal(size=(topics, 32))
    for t in range(topics):
        emb[7 + t * per : 7 + (t + 1) * per] += centers[t]

    def draw(t, k):
        return (7 + t * per + rng.integers(0, per, size=k)).tolist()

    pairs = [(f"th{i}", draw(i % topics, 12), draw(i % topics, 10)) for i in range(n)]
    return emb, pairs, draw


def test_relevance_model_separable():
    emb, pairs, draw = clustered_dataset()
    m = train_relevance(pairs, emb, RelevanceConfig(projection=32, epochs=5, seed=1))
    ranks = []
    for t in range(8):
        op, arg = draw(t, 12), draw(t, 10)
        others = [draw((t + k) % 8, 10) for k in range(1, 6)]
        ranks.append(relevance_rank(m, op, arg, others))
    mrr, p1 = mrr_p1(ranks)
    assert mrr >= 0.9
    same = m.score([pairs[0][1]], [pairs[0][1]])[0]
    cross = m.score([pairs[0][1]] * 3, [pairs[1][2], pairs[2][2], pairs[3][2]])
    assert same > cross.max()


def test_relevance_scores_independent_of_batch_order():
    emb, pairs, _ = clustered_dataset(n=20)
    m = RelevanceModel(emb, 16, seed=0)
    ops = [p[1] for p in pairs[:5]]
    args = [p[2] for p in pairs[:5]]
    a = m.score(ops, args)
    b = m.score(ops[::-1], args[::-1])[::-1]
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_relevance_needs_two_threads():
    with pytest.raises(DataError):
        train_relevance([("t", [7], [8])], np.zeros((10, 4)))


# -- significance and report ----------------------------------------------------


def test_approximate_randomization():
    rng = np.random.default_rng(1)
    a = rng.normal(size=200)
    assert approximate_randomization(a, a + 1.0, trials=2000) < 0.01
    assert approximate_randomization(a, a.copy(), trials=200) == 1.0
    with pytest.raises(DataError):
        approximate_randomization([1.0], [1.0, 2.0])


def test_report_json_and_table():
    row = SystemScores("dec-separate", 0.12, 0.08, 54.2, 0.8, 0.7, 0.1, 0.1, 0.36, n=10)
    rep = EvalReport([row, SystemScores("retrieval", 0.2, 0.1, 120.0)], {"seed": 0})
    again = EvalReport.from_json(rep.to_json())
    assert again.rows == rep.rows
    table = rep.to_table().splitlines()
    assert table[0].split() == ["System", "BLEU", "MTR-lite", "Len", "MRR", "P@1", "Generic%", "KP-gold%", "KP-reuse%"]
    assert table[1].split()[:4] == ["dec-separate", "12.00", "8.00", "54.2"]
    assert "-" in table[2].split()
    bad = EvalReport([SystemScores("x", 1.5, 0.1, 1.0)])
    with pytest.raises(DataError):
        bad.to_json()


def test_score_system():
    outs = [S("the cat sat"), S("a dog ran"), []]
    refs = [[S("the cat sat")], [S("a dog ran far")], [S("x")]]
    row = score_system("s", outs, refs, generic=[S("the cat")])
    assert row.bleu == pytest.approx((1.0 + math.exp(1 - 4 / 3) + 0.0) / 3)
    assert row.generic_rate == pytest.approx(1 / 3)
    assert row.length == pytest.approx(2.0)


def test_sweep_table_shape():
    cells = [{"p": p, "n": n, "meteor": 0.01 * n} for p in (5, 10, 20) for n in (1, 3, 5)]
    lines = sweep_table(cells).splitlines()
    assert len(lines) == 4
    assert lines[0].split()[1:] == ["1", "3", "5"]
    assert [ln.split()[0] for ln in lines[1:]] == ["5", "10", "20"]
