"""Discussion-thread ingestion, reply filtering, domain labeling and dataset assembly."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .text import EVD, TokenSeq, is_word, tokenize

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Reply:
    text: str
    delta_awarded: bool = False
    upvotes: int = 0
    downvotes: int = 0
    is_moderator: bool = False

    def __post_init__(self):
        if self.upvotes < 0 or self.downvotes < 0:
            raise DataError("vote counts must be non-negative")


@dataclass(frozen=True)
class Thread:
    id: str
    op_text: str
    replies: tuple = ()


def thread_from_json(obj) -> Thread:
    try:
        replies = tuple(
            Reply(r["text"], bool(r["delta"]), int(r["ups"]), int(r["downs"]), bool(r["mod"]))
            for r in obj["replies"]
        )
        return Thread(str(obj["id"]), obj["op"], replies)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed thread record: {exc}") from exc


def load_threads(path) -> list:
    threads = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "__meta__" in obj:
                continue
            t = thread_from_json(obj)
            if t.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate thread id {t.id!r}")
            seen.add(t.id)
            threads.append(t)
    return threads


def word_count(text: str) -> int:
    return sum(1 for t in tokenize(text).tokens if any(ch.isalnum() for ch in t))


def keep_reply(reply: Reply, offensive) -> bool:
    """All four quality rules: >5 words, clean, delta or net upvotes, not a moderator."""
    if word_count(reply.text) <= 5:
        return False
    if any(t in offensive for t in tokenize(reply.text).tokens):
        return False
    if not (reply.delta_awarded or reply.upvotes > reply.downvotes):
        return False
    return not reply.is_moderator


def filter_replies(thread: Thread, offensive) -> list:
    return [r for r in thread.replies if keep_reply(r, offensive)]


# ----------------------------------------------------------------------
# domain classifier


def label_abstracts(abstracts, politics_kw, nonpolitics_kw) -> list:
    """Label (title, text) pairs whose title hits keywords of exactly one class.

    Returns ``(title, text, label)`` with label ``"politics"``,
    ``"nonpolitics"`` or ``None``.
    """
    politics_kw = frozenset(k.lower() for k in politics_kw)
    nonpolitics_kw = frozenset(k.lower() for k in nonpolitics_kw)
    if politics_kw & nonpolitics_kw:
        raise ConfigError(f"keyword lists overlap: {sorted(politics_kw & nonpolitics_kw)}")
    out = []
    for title, text in abstracts:
        words = set(tokenize(title).tokens)
        pol, non = bool(words & politics_kw), bool(words & nonpolitics_kw)
        label = "politics" if pol and not non else "nonpolitics" if non and not pol else None
        out.append((title, text, label))
    return out


@dataclass
class DomainClassifier:
    vocab: dict
    weights: np.ndarray
    bias: float
    added_per_round: list = field(default_factory=list)

    def features(self, texts) -> np.ndarray:
        """Unigram counts divided by document length."""
        x = np.zeros((len(texts), len(self.vocab)))
        for row, text in enumerate(texts):
            toks = tokenize(text).tokens
            for tok, n in Counter(toks).items():
                col = self.vocab.get(tok)
                if col is not None:
                    x[row, col] = n
            x[row] /= max(len(toks), 1)
        return x

    def predict_proba(self, texts) -> np.ndarray:
        """Probability of the politics class."""
        z = self.features(texts) @ self.weights + self.bias
        return 0.5 * np.tanh(0.5 * z) + 0.5

    def predict(self, texts) -> list:
        return ["politics" if p >= 0.5 else "nonpolitics" for p in self.predict_proba(texts)]


def train_domain_classifier(labeled, unlabeled_ops, rounds=5, confidence=0.9, iters=500, lr=20.0):
    """Unigram logistic regression grown by self-training on unlabeled OPs.

    ``labeled`` holds ``(text, label)`` pairs with labels ``"politics"`` /
    ``"nonpolitics"``. Each round adds every unlabeled OP whose predicted
    class probability reaches ``confidence`` and retrains.
    """
    if {lab for _, lab in labeled} != {"politics", "nonpolitics"}:
        raise DataError("domain classifier needs both classes in the labeled data")
    vocab = {}
    for text in [t for t, _ in labeled] + list(unlabeled_ops):
        for tok in tokenize(text).tokens:
            if is_word(tok):
                vocab.setdefault(tok, len(vocab))
    texts = [t for t, _ in labeled]
    labels = [1.0 if lab == "politics" else 0.0 for _, lab in labeled]
    pool = list(unlabeled_ops)
    clf = DomainClassifier(vocab, np.zeros(len(vocab)), 0.0)

    def fit():
        x = clf.features(texts)
        y = np.array(labels)
        w = np.zeros(x.shape[1])
        b = 0.0
        for _ in range(iters):
            p = 0.5 * np.tanh(0.5 * (x @ w + b)) + 0.5
            err = p - y
            w -= lr * (x.T @ err / len(y) + 1e-4 * w)
            b -= lr * err.mean()
        clf.weights, clf.bias = w, b

    fit()
    for _ in range(rounds):
        if not pool:
            clf.added_per_round.append(0)
            continue
        probs = clf.predict_proba(pool)
        keep = []
        added = 0
        for text, p in zip(pool, probs):
            if p >= confidence or 1.0 - p >= confidence:
                texts.append(text)
                labels.append(1.0 if p >= 0.5 else 0.0)
                added += 1
            else:
                keep.append(text)
        pool = keep
        clf.added_per_round.append(added)
        if added:
            fit()
    return clf


# ----------------------------------------------------------------------
# evidence sampling and dataset assembly


def sample_evidence(statement_sents, retrieved, per_sent=3, repeats=3, rng=None) -> list:
    """Draw evidence subsets for a statement.

    ``retrieved[i]`` lists the evidence sentences (TokenSeq, rank order)
    available to statement sentence ``i``. Each repeat takes up to
    ``per_sent`` of them per statement sentence, without replacement, and
    keeps statement order (rank order inside a sentence). Duplicate and
    empty repeats are dropped. Returns a list of sentence tuples.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if len(retrieved) != len(statement_sents):
        raise DataError("one retrieved list per statement sentence required")
    samples = []
    seen = set()
    for _ in range(repeats):
        chosen = []
        for pool in retrieved:
            if not pool:
                continue
            take = min(per_sent, len(pool))
            idx = sorted(rng.choice(len(pool), size=take, replace=False).tolist())
            chosen.extend(pool[i] for i in idx)
        if not chosen:
            continue
        key = tuple(s.tokens for s in chosen)
        if key in seen:
            continue
        seen.add(key)
        samples.append(tuple(chosen))
    return samples


def concat_sentences(sents) -> TokenSeq:
    return TokenSeq(tuple(t for s in sents for t in s.tokens))


def split_dataset(op_ids, ratios=(8, 1, 1), explicit=None, rng=None) -> dict:
    """Assign every op id to one split.

    Either ``ratios`` (train, valid, test) over a seeded shuffle of the
    distinct ids, or ``explicit`` mapping split name -> list of ids.
    Returns op id -> split name.
    """
    unique = sorted(set(op_ids))
    if explicit is not None:
        assignment = {}
        for split, ids in explicit.items():
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")
            for op in ids:
                if op in assignment:
                    raise ConfigError(f"op {op!r} listed in both {assignment[op]} and {split}")
                assignment[op] = split
        missing = [op for op in unique if op not in assignment]
        if missing:
            raise DataError(f"{len(missing)} op ids have no split, e.g. {missing[0]!r}")
        return {op: assignment[op] for op in unique}
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigError(f"bad split ratios {ratios}")
    if rng is None:
        rng = np.random.default_rng(0)
    order = [unique[i] for i in rng.permutation(len(unique))]
    total = float(sum(ratios))
    n_valid = int(round(len(order) * ratios[1] / total))
    n_test = int(round(len(order) * ratios[2] / total))
    n_train = len(order) - n_valid - n_test
    out = {}
    for i, op in enumerate(order):
        out[op] = "train" if i < n_train else "valid" if i < n_train + n_valid else "test"
    return out


@dataclass
class TrainingExample:
    """One (statement, evidence, keyphrases, argument) instance.

    ``evidence_sents`` keeps sentence boundaries of the sampled evidence;
    ``retrieved`` keeps the full reranked evidence list for the
    retrieval baseline.
    """

    op_id: str
    split: str
    statement: tuple
    evidence_sents: tuple = ()
    keyphrases: tuple = ()
    argument: tuple = ()
    retrieved: tuple = ()

    def __post_init__(self):
        self.statement = tuple(self.statement)
        self.evidence_sents = tuple(tuple(s) for s in self.evidence_sents)
        self.keyphrases = tuple(self.keyphrases)
        self.argument = tuple(self.argument)
        self.retrieved = tuple(tuple(s) for s in self.retrieved)
        if not self.statement:
            raise DataError(f"example for op {self.op_id!r} has an empty statement")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.split in ("train", "valid") and not self.argument:
            raise DataError(f"{self.split} example for op {self.op_id!r} lacks a gold argument")

    @property
    def evidence(self) -> tuple:
        return tuple(t for s in self.evidence_sents for t in s)

    def model_input(self, with_evidence=True) -> tuple:
        """Statement, then ``<evd>`` and the evidence when requested."""
        if not with_evidence:
            return self.statement
        return self.statement + (EVD,) + self.evidence

    def to_json(self) -> dict:
        return {
            "op_id": self.op_id,
            "split": self.split,
            "statement": list(self.statement),
            "evidence": [list(s) for s in self.evidence_sents],
            "kp": list(self.keyphrases),
            "argument": list(self.argument),
            "retrieved": [list(s) for s in self.retrieved],
        }

    @classmethod
    def from_json(cls, obj) -> "TrainingExample":
        try:
            return cls(
                op_id=str(obj["op_id"]),
                split=obj["split"],
                statement=obj["statement"],
                evidence_sents=obj.get("evidence", ()),
                keyphrases=obj.get("kp", ()),
                argument=obj.get("argument", ()),
                retrieved=obj.get("retrieved", ()),
            )
        except KeyError as exc:
            raise DataError(f"example record missing field {exc}") from exc


def load_examples(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "__meta__" in obj:
                continue
            out.append(TrainingExample.from_json(obj))
    return out
