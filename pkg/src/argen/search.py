"""Hybrid beam search with segment-based coverage reranking."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

MODES = ("hybrid", "standard")


@dataclass(frozen=True)
class BeamConfig:
    k: int = 10
    n: int = 3
    p: int = 10
    max_len: int = 50
    seed: int = 0
    mode: str = "hybrid"
    length_exponent: float = 1.0
    final_rank: str = "coverage"  # or "logprob"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown beam mode {self.mode!r}")
        if not 1 <= self.n <= self.k:
            raise ConfigError("beam config needs 1 <= n <= k")
        if self.p < 1 or self.max_len < 1:
            raise ConfigError("rerank period and max length must be positive")
        if self.final_rank not in ("coverage", "logprob"):
            raise ConfigError(f"unknown final ranking {self.final_rank!r}")

    @property
    def deterministic(self):
        """Tokens taken by rank per expansion (all k in standard mode)."""
        return self.k if self.mode == "standard" else self.n

    @property
    def reranks(self):
        return self.mode == "hybrid"


@dataclass
class Hypothesis:
    tokens: tuple = ()
    logprob: float = 0.0
    state: object = None
    finished: bool = False
    covered: frozenset = frozenset()
    step_logprobs: tuple = ()

    def extend(self, token, logp, state, eos, content_ids):
        if self.finished:
            raise ValueError("finished hypotheses are never extended")
        covered = self.covered | {token} if token in content_ids else self.covered
        return Hypothesis(
            self.tokens + (token,), self.logprob + logp, state, token == eos, covered, self.step_logprobs + (logp,)
        )

    def output_tokens(self, eos):
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == eos else self.tokens


def expand_hybrid(probs, n, k, rng) -> list:
    """Top-``n`` tokens by probability, then ``k - n`` sampled from the rest.

    The sample is drawn without replacement from the distribution
    renormalised over tokens outside the top ``n``. Ties in the top-n
    break by ascending id. Zero-probability tokens are never returned,
    so fewer than ``k`` tokens come back when the support is small.
    """
    probs = np.asarray(probs, dtype=np.float64)
    k = min(k, probs.shape[0])
    n = min(n, k)
    order = np.lexsort((np.arange(probs.shape[0]), -probs))
    top = [int(t) for t in order[:n] if probs[t] > 0]
    m = k - n
    if m <= 0:
        return top
    rest = order[n:]
    rest = rest[probs[rest] > 0]
    m = min(m, rest.shape[0])
    if m == 0:
        return top
    tail = probs[rest] / probs[rest].sum()
    drawn = rng.choice(rest, size=m, replace=False, p=tail)
    return top + [int(t) for t in drawn]


def coverage_score(hyp: Hypothesis, content_ids) -> float:
    if not content_ids:
        return 0.0
    return len(hyp.covered & frozenset(content_ids)) / len(content_ids)


def rerank_beam(beams, k, content_ids) -> list:
    """Coverage descending, then log-probability descending; keep ``k``."""
    return sorted(beams, key=lambda h: (-coverage_score(h, content_ids), -h.logprob))[:k]


def final_score(hyp: Hypothesis, config: BeamConfig):
    length = max(len(hyp.tokens), 1)
    return hyp.logprob / (length**config.length_exponent)


@dataclass
class DecodeResult:
    hypotheses: list
    all_unfinished: bool = False
    steps: int = 0
    trace: list = field(default_factory=list)

    @property
    def best(self):
        return self.hypotheses[0]


def decode(step_fn, init_state, start_token, eos, config: BeamConfig, content_ids=(), rng=None) -> DecodeResult:
    """Beam search driven by ``step_fn(states, prev_tokens) -> (states, probs)``.

    Each live hypothesis is expanded with :func:`expand_hybrid` (plain
    top-k in standard mode). Candidates ending in ``eos`` go to the
    finished pool; the rest are pruned to ``k`` by log-probability, or by
    :func:`rerank_beam` at steps that are multiples of ``p`` in hybrid
    mode. Search stops at ``max_len`` or once ``k`` hypotheses finished.
    """
    content_ids = frozenset(content_ids)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    beams = [Hypothesis(state=init_state)]
    finished = []
    step = 0
    while beams and step < config.max_len and len(finished) < config.k:
        step += 1
        prev = [h.tokens[-1] if h.tokens else start_token for h in beams]
        states, probs = step_fn([h.state for h in beams], prev)
        cands = []
        for i, hyp in enumerate(beams):
            for tok in expand_hybrid(probs[i], config.deterministic, config.k, rng):
                cands.append(hyp.extend(tok, math.log(probs[i][tok]), states[i], eos, content_ids))
        live = []
        for c in cands:
            (finished if c.finished else live).append(c)
        if config.reranks and step % config.p == 0:
            beams = rerank_beam(live, config.k, content_ids)
        else:
            beams = sorted(live, key=lambda h: -h.logprob)[: config.k]
    flagged = False
    pool = finished
    if not pool:
        flagged = True
        log.warning("no hypothesis finished within %d steps; returning unfinished beams", config.max_len)
        pool = beams
    if config.final_rank == "coverage":
        pool.sort(key=lambda h: (-coverage_score(h, content_ids), -final_score(h, config)))
    else:
        pool.sort(key=lambda h: -final_score(h, config))
    return DecodeResult(pool, flagged, step)


def example_rng(seed, example_index):
    """Independent stream per example, stable across worker counts."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(example_index)]))


@dataclass
class Generation:
    tokens: list
    logprob: float
    coverage: float
    kp_tokens: list
    all_unfinished: bool = False


def generate(model, src_ids, config: BeamConfig, content_ids=(), rng=None, kp_config=None) -> Generation:
    """Decode keyphrases (if the model has them) and then the argument.

    Keyphrases use a plain beam ranked by log-probability; the argument
    uses ``config``. Keyphrase-decoder states over ``<s>`` plus the chosen
    keyphrases form the memory of the keyphrase attention, as in training.
    """
    from .model import ARG_ID, BOS_ID, EOS_ID

    rng = rng if rng is not None else np.random.default_rng(config.seed)
    mcfg = model.config
    ctx = model.start(src_ids)
    kp_tokens, kp_mem, state, start = [], None, None, BOS_ID
    if mcfg.uses_keyphrases:
        dec = model.kp_decoder()
        end = ARG_ID if mcfg.shared_decoder else EOS_ID
        mode = "zero" if mcfg.shared_decoder else "attend"
        kcfg = kp_config or BeamConfig(k=config.k, n=config.k, p=config.p, max_len=config.max_len, mode="standard", final_rank="logprob")
        kres = decode(
            lambda states, prev: ctx.step(dec, states, prev, None, mode),
            ctx.initial_state(dec), BOS_ID, end, kcfg, rng=rng,
        )
        kp_tokens = list(kres.best.output_tokens(end))
        tops, final = ctx.teacher_force(dec, ctx.initial_state(dec), [BOS_ID] + kp_tokens, mode)
        if mcfg.attend_keyphrases:
            kp_mem = ctx.keyphrase_memory(tops)
        if mcfg.shared_decoder:
            state, start = final, ARG_ID
    if state is None:
        state = ctx.initial_state("argdec")
    mode = "attend" if kp_mem is not None else "zero"
    res = decode(
        lambda states, prev: ctx.step("argdec", states, prev, kp_mem, mode),
        state, start, EOS_ID, config, content_ids, rng,
    )
    best = res.best
    return Generation(
        list(best.output_tokens(EOS_ID)), float(best.logprob), coverage_score(best, frozenset(content_ids)), kp_tokens, res.all_unfinished
    )
