import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argen.errors import ConfigError
from argen.search import (
    BeamConfig,
    Hypothesis,
    coverage_score,
    decode,
    example_rng,
    expand_hybrid,
    rerank_beam,
)

V = 5


def toy_probs(prefix):
    """Deterministic next-token distribution keyed on the prefix."""
    seed = 1 + sum((t + 1) * 7**i for i, t in enumerate(prefix))
    logits = np.random.default_rng(seed).normal(size=V) * 2.0
    e = np.exp(logits - logits.max())
    return e / e.sum()


def toy_step(states, prev):
    new = []
    probs = []
    for prefix, tok in zip(states, prev):
        prefix = prefix if tok is None else prefix + (tok,)
        new.append(prefix)
        probs.append(toy_probs(prefix))
    return new, np.stack(probs)


def enumerate_best(length):
    best, best_lp = None, -math.inf
    for seq in itertools.product(range(V), repeat=length):
        lp = sum(math.log(toy_probs(seq[:i])[t]) for i, t in enumerate(seq))
        if lp > best_lp:
            best, best_lp = seq, lp
    return best, best_lp


def test_toy_lm_matches_enumeration():
    cfg = BeamConfig(k=125, n=125, p=1, max_len=3, mode="standard", final_rank="logprob")
    res = decode(toy_step, (), None, -1, cfg)
    seq, lp = enumerate_best(3)
    assert res.all_unfinished
    assert res.best.tokens == seq
    assert res.best.logprob == pytest.approx(lp, abs=1e-12)


def test_hybrid_n_equals_k_is_standard():
    a = decode(toy_step, (), None, -1, BeamConfig(k=4, n=4, p=2, max_len=3, mode="hybrid", final_rank="logprob"))
    b = decode(toy_step, (), None, -1, BeamConfig(k=4, n=4, p=2, max_len=3, mode="standard", final_rank="logprob"))
    assert [h.tokens for h in a.hypotheses] == [h.tokens for h in b.hypotheses]


def test_logprob_is_sum_of_steps():
    res = decode(toy_step, (), None, -1, BeamConfig(k=3, n=1, p=2, max_len=3, seed=5))
    for h in res.hypotheses:
        direct = sum(math.log(toy_probs(h.tokens[:i])[t]) for i, t in enumerate(h.tokens))
        assert h.logprob == pytest.approx(direct, abs=1e-12)
        assert all(lp <= 0 for lp in h.step_logprobs)


def test_same_seed_same_output():
    cfg = BeamConfig(k=4, n=2, p=2, max_len=3, seed=11)
    a = decode(toy_step, (), None, -1, cfg, content_ids={1, 2})
    b = decode(toy_step, (), None, -1, cfg, content_ids={1, 2})
    assert [(h.tokens, h.logprob) for h in a.hypotheses] == [(h.tokens, h.logprob) for h in b.hypotheses]


def test_finished_pool_and_stop():
    # token 0 ends the sequence; with k finished the loop stops early
    def step(states, prev):
        p = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
        return list(states), np.tile(p, (len(states), 1))

    res = decode(step, None, 9, 0, BeamConfig(k=2, n=2, max_len=10, mode="standard", final_rank="logprob"))
    assert not res.all_unfinished
    assert all(h.finished for h in res.hypotheses)
    assert res.best.tokens == (0,)
    assert res.steps < 10


def test_config_validation():
    with pytest.raises(ConfigError):
        BeamConfig(k=3, n=4)
    with pytest.raises(ConfigError):
        BeamConfig(n=0)
    with pytest.raises(ConfigError):
        BeamConfig(p=0)
    with pytest.raises(ConfigError):
        BeamConfig(mode="greedy")


def test_extend_finished_refused():
    h = Hypothesis().extend(0, -0.1, None, 0, set())
    with pytest.raises(ValueError):
        h.extend(1, -0.1, None, 0, set())


# -- expansion ----------------------------------------------------------


def test_expand_tie_break_by_id():
    probs = [0.2, 0.3, 0.3, 0.2]
    assert expand_hybrid(probs, 3, 3, np.random.default_rng(0)) == [1, 2, 0]


def test_expand_capped_at_vocab():
    out = expand_hybrid([0.5, 0.5], 1, 10, np.random.default_rng(0))
    assert sorted(out) == [0, 1]


def test_expand_skips_zero_probability():
    out = expand_hybrid([0.0, 0.7, 0.3, 0.0], 1, 4, np.random.default_rng(0))
    assert out == [1, 2]


def test_sampled_disjoint_from_top():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(12))
    top = set(np.argsort(-probs, kind="stable")[:3].tolist())
    for _ in range(10_000):
        out = expand_hybrid(probs, 3, 6, rng)
        assert set(out[:3]) == top
        assert not set(out[3:]) & top
        assert len(set(out)) == 6


def test_sampled_slot_frequencies():
    rng = np.random.default_rng(2024)
    n = 100_000
    counts = np.zeros(4)
    for _ in range(n):
        out = expand_hybrid([0.5, 0.3, 0.1, 0.1], 1, 2, rng)
        assert out[0] == 0
        counts[out[1]] += 1
    expect = np.array([0.6, 0.2, 0.2])
    freq = counts[1:] / n
    sigma = np.sqrt(expect * (1 - expect) / n)
    assert counts[0] == 0
    assert np.all(np.abs(freq - expect) <= 3 * sigma)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=15), st.data())
def test_n_equals_k_is_top_k(weights, data):
    probs = np.array(weights) / sum(weights)
    k = data.draw(st.integers(1, len(weights)))
    out = expand_hybrid(probs, k, k, np.random.default_rng(0))
    expect = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:k]
    assert out == expect


# -- coverage and reranking ------------------------------------------------


def hyp(tokens, lp, content):
    return Hypothesis(tuple(tokens), lp, None, False, frozenset(t for t in tokens if t in content))


def test_coverage_values():
    content = {1, 2, 3, 4}
    assert coverage_score(hyp([1, 2, 3, 4], -1, content), content) == 1.0
    assert coverage_score(hyp([7, 8], -1, content), content) == 0.0
    assert coverage_score(hyp([1, 9, 3], -1, content), content) == 0.5
    assert coverage_score(hyp([1], -1, set()), set()) == 0.0


def test_rerank_equal_coverage_is_logprob_order():
    hs = [hyp([9], -3.0, {1}), hyp([8], -1.0, {1}), hyp([7], -2.0, {1})]
    assert [h.logprob for h in rerank_beam(hs, 3, {1})] == [-1.0, -2.0, -3.0]


def test_rerank_prefers_coverage():
    generic = hyp([9, 9], -0.5, {1, 2})
    specific = hyp([1, 2], -8.0, {1, 2})
    assert rerank_beam([generic, specific], 1, {1, 2}) == [specific]


def test_rerank_matches_sort_oracle():
    content = {1, 2, 3, 4}
    hs = [
        hyp([1, 5], -2.0, content),
        hyp([1, 2], -4.0, content),
        hyp([6, 7], -0.1, content),
        hyp([2, 3], -1.5, content),
        hyp([4, 0], -0.7, content),
    ]

    def better(a, b):
        ca = len(set(a.tokens) & content)
        cb = len(set(b.tokens) & content)
        return ca > cb or (ca == cb and a.logprob > b.logprob)

    oracle = list(hs)
    for i in range(len(oracle)):
        for j in range(len(oracle) - 1 - i):
            if better(oracle[j + 1], oracle[j]):
                oracle[j], oracle[j + 1] = oracle[j + 1], oracle[j]
    assert rerank_beam(hs, 5, content) == oracle
    assert rerank_beam(hs, 3, content) == oracle[:3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 6), max_size=4), st.floats(-20, 0)), min_size=1, max_size=12))
def test_rerank_keeps_multiset(items):
    content = {0, 2, 4}
    hs = [hyp(t, lp, content) for t, lp in items]
    out = rerank_beam(hs, len(hs), content)
    assert sorted(map(id, out)) == sorted(map(id, hs))


def test_example_rng_streams():
    a = example_rng(7, 0).random(3)
    b = example_rng(7, 1).random(3)
    assert not np.allclose(a, b)
    assert np.array_equal(a, example_rng(7, 0).random(3))
