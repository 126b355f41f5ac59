"""Automatic metrics, the topic-relevance ranker and the evaluation report."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tape, Tensor
from .errors import ConfigError, DataError
from .keyphrase import GoldKeyphraseSeq
from .optim import Adam
from .text import PHRASE

log = logging.getLogger(__name__)

# ----------------------------------------------------------------------
# BLEU-2


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu2_single(candidate, reference) -> float:
    """Geometric mean over the orders the candidate has (one token: unigrams only)."""
    cand, ref = list(candidate), list(reference)
    orders = [n for n in (1, 2) if len(cand) >= n]
    logp = 0.0
    for n in orders:
        c = _ngrams(cand, n)
        r = _ngrams(ref, n)
        clipped = sum(min(k, r[g]) for g, k in c.items())
        if clipped == 0:
            return 0.0
        logp += math.log(clipped / sum(c.values())) / len(orders)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(logp)


def bleu2(candidate, references) -> float:
    """Sentence BLEU with uni- and bigrams, best over the references."""
    if not len(candidate):
        raise DataError("bleu2 needs a non-empty candidate")
    references = list(references)
    if not references:
        raise DataError("bleu2 needs at least one reference")
    return max(bleu2_single(candidate, r) for r in references)


# ----------------------------------------------------------------------
# METEOR-lite

_VOWELS = set("aeiou")


def stem(word: str) -> str:
    """Small suffix stripper: plurals, -ing, -ed, -ly, -ies, doubled consonants."""
    w = word.lower()
    if len(w) <= 3:
        return w
    if w.endswith("ies") and len(w) > 4:
        return w[:-3] + "y"
    for suf in ("ingly", "edly", "ing", "ed", "ly"):
        if w.endswith(suf) and len(w) - len(suf) >= 3 and _VOWELS & set(w[: -len(suf)]):
            w = w[: -len(suf)]
            if len(w) > 2 and w[-1] == w[-2] and w[-1] not in "lsz" and w[-1] not in _VOWELS:
                w = w[:-1]
            return w
    if w.endswith("sses"):
        return w[:-2]
    if w.endswith("es") and w[-3] in "sxz" or w.endswith(("ches", "shes")):
        return w[:-2]
    if w.endswith("s") and not w.endswith(("ss", "us", "is")):
        return _drop_e(w[:-1])
    return _drop_e(w)


def _drop_e(w):
    # "hope" and "hoping" both end up as "hop"
    return w[:-1] if len(w) > 3 and w.endswith("e") else w


def _align(cand, ref):
    """Exact matches first, then stem matches; each token used once.

    Returns (candidate index, reference index) pairs sorted by candidate
    position. Within a stage, earlier reference positions are preferred.
    """
    used_c, used_r, pairs = set(), set(), []
    for key in (lambda t: t.lower(), stem):
        rk = [key(t) for t in ref]
        for i, t in enumerate(cand):
            if i in used_c:
                continue
            k = key(t)
            for j, r in enumerate(rk):
                if j not in used_r and r == k:
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def meteor_single(candidate, reference) -> float:
    cand, ref = list(candidate), list(reference)
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    penalty = 0.0 if chunks == 1 else 0.5 * (chunks / m) ** 3
    return fmean * (1 - penalty)


def meteor_lite(candidate, references) -> float:
    """Stem-matching METEOR without synonym or paraphrase tables."""
    references = list(references)
    if not len(candidate) or not references or not all(len(r) for r in references):
        raise DataError("meteor_lite needs non-empty candidate and references")
    return max(meteor_single(candidate, r) for r in references)


# ----------------------------------------------------------------------
# generic responses and keyphrase reuse


def contains_phrase(tokens, phrase) -> bool:
    tokens, phrase = list(tokens), list(phrase)
    n = len(phrase)
    return n > 0 and any(tokens[i : i + n] == phrase for i in range(len(tokens) - n + 1))


def generic_response_rate(outputs, generic_list) -> float:
    generic_list = [list(p) for p in generic_list if len(p)]
    if not generic_list:
        raise ConfigError("generic response list is empty")
    outputs = list(outputs)
    if not outputs:
        return 0.0
    hits = sum(1 for o in outputs if any(contains_phrase(o, p) for p in generic_list))
    return hits / len(outputs)


def split_phrases(serialized):
    """Phrases of a ``<phrase>``-delimited sequence; empty pieces dropped."""
    out, cur = [], []
    for tok in serialized:
        if tok == PHRASE:
            if cur:
                out.append(tuple(cur))
            cur = []
        else:
            cur.append(tok)
    if cur:
        out.append(tuple(cur))
    return out


def keyphrase_reuse(generated, gold, argument) -> tuple:
    """(fraction of generated phrases in gold, fraction reused in the argument)."""

    def phrases(x):
        if isinstance(x, GoldKeyphraseSeq):
            return list(x.phrases)
        x = list(x)
        if x and not isinstance(x[0], str):
            return [tuple(p) for p in x]
        return split_phrases(x)

    gen = phrases(generated)
    if not gen:
        return 0.0, 0.0
    gold_set = set(phrases(gold))
    overlap = sum(1 for p in gen if p in gold_set) / len(gen)
    reuse = sum(1 for p in gen if contains_phrase(argument, p)) / len(gen)
    return overlap, reuse


# ----------------------------------------------------------------------
# relevance ranker


def jaccard_distance(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 0.0
    return 1.0 - len(a & b) / len(a | b)


@dataclass
class RelevanceConfig:
    projection: int = 100
    samples: int = 100
    negatives: int = 5
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0


class RelevanceModel:
    """Averaged embeddings, two tanh layers per side, sigmoid of the dot product."""

    SIDES = ("op", "arg")

    def __init__(self, embeddings, projection=100, seed=0):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise DataError("embedding table must be two-dimensional")
        self.embeddings = emb
        rng = np.random.default_rng(seed)
        d = emb.shape[1]
        self.params = {}
        for side in self.SIDES:
            for layer, (i, o) in enumerate(((d, projection), (projection, projection))):
                s = math.sqrt(6.0 / (i + o))
                self.params[f"{side}.w{layer}"] = Parameter(f"{side}.w{layer}", rng.uniform(-s, s, size=(i, o)))
                self.params[f"{side}.b{layer}"] = Parameter(f"{side}.b{layer}", np.zeros(o))

    @property
    def projection(self):
        return self.params["op.w1"].shape[1]

    def average(self, seqs) -> np.ndarray:
        """Mean embedding per id sequence; empty sequences map to zeros."""
        out = np.zeros((len(seqs), self.embeddings.shape[1]))
        for i, s in enumerate(seqs):
            if len(s):
                out[i] = self.embeddings[np.asarray(s, dtype=np.int64)].mean(axis=0)
        return out

    def _project(self, side, x: Tensor) -> Tensor:
        p = self.params
        for layer in range(2):
            x = ag.tanh(ag.matmul(x, p[f"{side}.w{layer}"]) + p[f"{side}.b{layer}"])
        return x

    def logits(self, ops, args) -> Tensor:
        a = self._project("op", Tensor(self.average(ops)))
        b = self._project("arg", Tensor(self.average(args)))
        return ag.sum(a * b, axis=1)

    def score(self, ops, args) -> np.ndarray:
        z = self.logits(ops, args).data
        return 1.0 / (1.0 + np.exp(-z))

    def state_dict(self):
        return {k: p.data for k, p in self.params.items()}


def _logistic_loss(z: Tensor, labels) -> Tensor:
    n = z.shape[0]
    col = ag.reshape(z, (n, 1))
    probs = ag.concat([ag.sigmoid(ag.scale(col, -1.0)), ag.sigmoid(col)])
    return ag.cross_entropy(probs, np.asarray(labels, dtype=np.int64))


def sample_negatives(index, pairs, rng, samples=100, keep=5) -> list:
    """Arguments from other threads, the ``keep`` most Jaccard-distant of ``samples``."""
    thread, op, arg = pairs[index]
    pool = [j for j, (t, _, _) in enumerate(pairs) if t != thread]
    if not pool:
        return []
    # sampling order doubles as a random tie-break among equal distances
    pool = rng.permutation(pool)[:samples].tolist()
    if len(pool) < keep:
        log.warning("only %d negative candidates for pair %d", len(pool), index)
    pool.sort(key=lambda j: -jaccard_distance(arg, pairs[j][2]))
    return pool[:keep]


def train_relevance(pairs, embeddings, config: RelevanceConfig | None = None) -> RelevanceModel:
    """Train on ``(thread_id, statement ids, argument ids)`` positives.

    Each positive is paired with sampled negatives from other threads and
    the model is fitted with logistic loss, one positive against the
    negatives.
    """
    config = config or RelevanceConfig()
    pairs = list(pairs)
    if len({t for t, _, _ in pairs}) < 2:
        raise DataError("relevance training needs at least two threads")
    rng = np.random.default_rng(config.seed)
    model = RelevanceModel(embeddings, config.projection, config.seed)
    negs = [sample_negatives(i, pairs, rng, config.samples, config.negatives) for i in range(len(pairs))]
    opt = Adam(list(model.params.values()), lr=config.lr)
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        for s in range(0, len(order), config.batch_size):
            ops, args, labels = [], [], []
            for i in order[s : s + config.batch_size]:
                _, op, arg = pairs[i]
                ops.append(op)
                args.append(arg)
                labels.append(1)
                for j in negs[i]:
                    ops.append(op)
                    args.append(pairs[j][2])
                    labels.append(0)
            opt.zero_grad()
            with Tape() as tape:
                loss = _logistic_loss(model.logits(ops, args), labels)
            tape.backward(loss)
            opt.step()
    return model


def relevance_rank(model: RelevanceModel, op, candidate, distractors) -> int:
    """1-based rank of ``candidate``; ties count against it."""
    scores = model.score([op] * (1 + len(distractors)), [candidate] + list(distractors))
    return 1 + int(np.sum(scores[1:] >= scores[0]))


def mrr_p1(ranks) -> tuple:
    ranks = list(ranks)
    if not ranks:
        raise DataError("no ranks to aggregate")
    return sum(1.0 / r for r in ranks) / len(ranks), sum(1 for r in ranks if r == 1) / len(ranks)


def tfidf_matrix(docs) -> np.ndarray:
    """L2-normalised tf * log(N / df) rows over the union vocabulary."""
    vocab = {}
    for d in docs:
        for t in d:
            vocab.setdefault(t, len(vocab))
    m = np.zeros((len(docs), len(vocab)))
    for i, d in enumerate(docs):
        for t, c in Counter(d).items():
            m[i, vocab[t]] = c
    df = (m > 0).sum(axis=0)
    m *= np.log(len(docs) / np.maximum(df, 1))
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def select_distractors(evidence, n=5) -> list:
    """For each item, the ``n`` other items with the most similar evidence."""
    m = tfidf_matrix([list(e) for e in evidence])
    sims = m @ m.T
    out = []
    for i in range(len(evidence)):
        others = [j for j in range(len(evidence)) if j != i]
        others.sort(key=lambda j: (-sims[i, j], j))
        out.append(others[:n])
    return out


def evaluate_relevance(model, ops, outputs, evidence, n=5) -> tuple:
    """MRR and P@1 of each output against outputs for similar-evidence OPs."""
    ranks = []
    for i, others in enumerate(select_distractors(evidence, n)):
        ranks.append(relevance_rank(model, ops[i], outputs[i], [outputs[j] for j in others]))
    return mrr_p1(ranks)


# ----------------------------------------------------------------------
# significance


def approximate_randomization(a, b, trials=10_000, seed=0) -> float:
    """Two-sided paired test on mean difference; returns the p-value."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise DataError("paired samples must be non-empty and equally long")
    rng = np.random.default_rng(seed)
    observed = abs(a.mean() - b.mean())
    swaps = rng.random((trials, a.size)) < 0.5
    diff = np.where(swaps, b - a, a - b).mean(axis=1)
    return float((np.sum(np.abs(diff) >= observed - 1e-12) + 1) / (trials + 1))


# ----------------------------------------------------------------------
# report


@dataclass
class SystemScores:
    system: str
    bleu: float
    meteor: float
    length: float
    mrr: float | None = None
    p1: float | None = None
    generic_rate: float | None = None
    kp_gold_overlap: float | None = None
    kp_reuse: float | None = None
    n: int = 0


COLUMNS = (
    ("System", "system", "{}"),
    ("BLEU", "bleu", "{:.2f}"),
    ("MTR-lite", "meteor", "{:.2f}"),
    ("Len", "length", "{:.1f}"),
    ("MRR", "mrr", "{:.2f}"),
    ("P@1", "p1", "{:.2f}"),
    ("Generic%", "generic_rate", "{:.1f}"),
    ("KP-gold%", "kp_gold_overlap", "{:.1f}"),
    ("KP-reuse%", "kp_reuse", "{:.1f}"),
)
_PERCENT = {"bleu", "meteor", "mrr", "p1", "generic_rate", "kp_gold_overlap", "kp_reuse"}


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)

    def validate(self):
        for r in self.rows:
            for name in ("bleu", "meteor", "generic_rate", "kp_gold_overlap", "kp_reuse", "p1"):
                v = getattr(r, name)
                if v is not None and not 0.0 <= v <= 1.0:
                    raise DataError(f"{r.system}: {name}={v} outside [0, 1]")
            if r.mrr is not None and not 0.0 < r.mrr <= 1.0:
                raise DataError(f"{r.system}: mrr={r.mrr} outside (0, 1]")

    def to_json(self) -> str:
        self.validate()
        return json.dumps({"meta": self.meta, "systems": [asdict(r) for r in self.rows], "sweep": self.sweep}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        d = json.loads(text)
        return cls([SystemScores(**r) for r in d["systems"]], d.get("meta", {}), d.get("sweep", []))

    def to_table(self) -> str:
        """Aligned columns; scores and rates shown as percentages."""
        header = [c[0] for c in COLUMNS]
        body = []
        for r in self.rows:
            line = []
            for _, attr, fmt in COLUMNS:
                v = getattr(r, attr)
                if v is None:
                    line.append("-")
                else:
                    line.append(fmt.format(100 * v if attr in _PERCENT else v))
            body.append(line)
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(row, widths))) for row in [header] + body]
        return "\n".join(lines) + "\n"


def score_system(system, outputs, references, ops=None, evidence=None, relevance=None, generic=None, kp_pairs=None) -> SystemScores:
    """Corpus averages of sentence-level metrics for one system.

    ``references`` holds a list of reference token sequences per output.
    ``kp_pairs`` holds ``(generated kp, gold kp, reference argument)``.
    """
    outputs = [list(o) for o in outputs]
    if len(outputs) != len(references):
        raise DataError("outputs and references differ in length")
    # an empty output scores zero rather than failing the whole report
    bleu = [bleu2(o, refs) if o else 0.0 for o, refs in zip(outputs, references)]
    met = [meteor_lite(o, refs) if o else 0.0 for o, refs in zip(outputs, references)]
    row = SystemScores(system, float(np.mean(bleu)), float(np.mean(met)), float(np.mean([len(o) for o in outputs])), n=len(outputs))
    if relevance is not None and ops is not None and evidence is not None and len(outputs) > 1:
        row.mrr, row.p1 = evaluate_relevance(relevance, ops, outputs, evidence)
    if generic:
        row.generic_rate = generic_response_rate(outputs, generic)
    if kp_pairs:
        rates = [keyphrase_reuse(g, gold, arg) for g, gold, arg in kp_pairs]
        row.kp_gold_overlap = float(np.mean([r[0] for r in rates]))
        row.kp_reuse = float(np.mean([r[1] for r in rates]))
    return row


def sweep_table(cells, metric="meteor") -> str:
    """Rerank period by deterministic count grid of one metric."""
    ps = sorted({c["p"] for c in cells})
    ns = sorted({c["n"] for c in cells})
    val = {(c["p"], c["n"]): c[metric] for c in cells}
    header = [f"p\\n({metric})"] + [str(n) for n in ns]
    rows = [[str(p)] + [f"{100 * val[(p, n)]:.2f}" if (p, n) in val else "-" for n in ns] for p in ps]
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    return "\n".join("  ".join(x.rjust(w) for x, w in zip(r, widths)) for r in [header] + rows) + "\n"
