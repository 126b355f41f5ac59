"""End-to-end plumbing: configuration, artifacts and the steps behind each subcommand."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .corpus import (
    TrainingExample,
    filter_replies,
    label_abstracts,
    load_examples,
    load_threads,
    sample_evidence,
    split_dataset,
    train_domain_classifier,
)
from .errors import ConfigError, DataError
from .evaluation import (
    EvalReport,
    RelevanceConfig,
    bleu2,
    score_system,
    sweep_table,
    train_relevance,
)
from .keyphrase import gold_keyphrases
from .model import ModelConfig, Seq2SeqModel, parse_kv
from .retrieval import InvertedIndex, build_index, load_articles, retrieve_evidence
from .search import BeamConfig, example_rng, generate
from .text import (
    RESERVED,
    Vocabulary,
    build_vocab,
    content_words,
    default_offensive,
    default_stopwords,
    load_phrase_list,
    load_wordlist,
    split_sentences,
    tokenize,
)
from .train import (
    DEFAULT_STAGES,
    CurriculumStage,
    TrainConfig,
    load_embeddings,
    load_model,
    save_model,
    stage_tokens,
    train,
)

log = logging.getLogger(__name__)

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "beam": BeamConfig}


@dataclass
class PipelineConfig:
    threads: str = "threads.jsonl"
    articles: str = "articles.jsonl"
    abstracts: str = ""
    politics_keywords: str = ""
    nonpolitics_keywords: str = ""
    index: str = "index.bin"
    examples: str = "examples.jsonl"
    checkpoint: str = "model.ckpt"
    pretrained: str = ""
    embeddings: str = ""
    stopwords: str = ""
    offensive: str = ""
    generic: str = ""
    split_ratios: str = "8,1,1"
    per_sent: int = 3
    repeats: int = 3
    sig_cutoff: float = 10.83
    top_articles: int = 5
    para_cap: int = 100
    sent_cap: int = 10
    vocab_cap: int = 50_000
    stages: str = "50,0,0,30;150,80,80,80;400,120,120,120"
    relevance_epochs: int = 10
    relevance_projection: int = 100
    seed: int = 0
    jobs: int = 1
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    beam: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text, base_dir="") -> "PipelineConfig":
        """``key = value`` lines; ``model.*``, ``train.*`` and ``beam.*`` keys go to those sections.

        Relative paths are resolved against ``base_dir``.
        """
        top, sections = [], {k: [] for k in SECTIONS}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value")
            key = line.split("=", 1)[0].strip()
            prefix = key.split(".", 1)[0]
            if "." in key and prefix in sections:
                sections[prefix].append(line.split(".", 1)[1])
            else:
                top.append(line)
        scalar = [f for f in dataclasses.fields(cls) if f.name not in SECTIONS]
        holder = dataclasses.make_dataclass("_Top", [(f.name, f.type) for f in scalar])
        cfg = cls(**parse_kv("\n".join(top), holder))
        for name, lines in sections.items():
            setattr(cfg, name, parse_kv("\n".join(lines), SECTIONS[name]))
        if base_dir:
            for f in PATH_FIELDS:
                v = getattr(cfg, f)
                if v and not os.path.isabs(v):
                    setattr(cfg, f, os.path.join(base_dir, v))
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, os.path.dirname(os.path.abspath(path)))

    def digest(self) -> str:
        # worker count does not change any output
        values = {k: v for k, v in asdict(self).items() if k != "jobs"}
        blob = json.dumps(values, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def meta(self, command, **extra) -> dict:
        return {"version": __version__, "seed": self.seed, "config_hash": self.digest(), "command": command, **extra}

    # -- derived configs ------------------------------------------------

    def curriculum(self):
        stages = []
        for i, part in enumerate(p for p in self.stages.split(";") if p.strip()):
            try:
                nums = [int(x) for x in part.split(",")]
            except ValueError as exc:
                raise ConfigError(f"bad curriculum stage {part!r}") from exc
            if len(nums) != 4:
                raise ConfigError(f"stage {part!r} needs op,evidence,keyphrases,argument lengths")
            stages.append(CurriculumStage(i + 1, *nums))
        return stages or list(DEFAULT_STAGES)

    def model_config(self, vocab_size) -> ModelConfig:
        values = {"seed": self.seed, **self.model, "vocab_size": vocab_size}
        if values.get("system", "dec-separate") == "seq2seq":
            values.setdefault("encode_evidence", False)
        else:
            values["encode_evidence"] = True
        return ModelConfig(**values)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def beam_config(self, system) -> BeamConfig:
        values = {"seed": self.seed, **self.beam}
        if "mode" not in values and system == "seq2seq":
            values["mode"] = "standard"
        if values.get("mode") == "standard":
            values.setdefault("n", values.get("k", BeamConfig.k))
        return BeamConfig(**values)

    def stopword_set(self):
        return load_wordlist(self.stopwords) if self.stopwords else default_stopwords()

    def require(self, *names):
        for name in names:
            path = getattr(self, name)
            if not path or not os.path.exists(path):
                raise DataError(f"{name} file not found: {path or '(unset)'}")


PATH_FIELDS = (
    "threads", "articles", "abstracts", "politics_keywords", "nonpolitics_keywords", "index", "examples",
    "checkpoint", "pretrained", "embeddings", "stopwords", "offensive", "generic",
)


# ----------------------------------------------------------------------
# JSONL artifacts


def write_jsonl(path, meta, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"__meta__": meta}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path):
    """Returns ``(meta, records)``; meta is ``{}`` when the file has none."""
    meta, out = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON") from exc
            if "__meta__" in obj:
                meta = obj["__meta__"]
            else:
                out.append(obj)
    return meta, out


# ----------------------------------------------------------------------
# index


def cmd_index(cfg: PipelineConfig, out=None):
    cfg.require("articles")
    index = build_index(load_articles(cfg.articles), cfg.stopword_set())
    path = out or cfg.index
    index.save(path, cfg.meta("index"))
    return index, path


# ----------------------------------------------------------------------
# prepare


def domain_filter(cfg: PipelineConfig, threads):
    """Keep politics threads when abstracts and keyword lists are configured."""
    if not cfg.abstracts:
        return threads
    cfg.require("abstracts", "politics_keywords", "nonpolitics_keywords")
    abstracts = [(a["title"], a["text"]) for a in read_jsonl(cfg.abstracts)[1]]
    labeled = label_abstracts(abstracts, load_wordlist(cfg.politics_keywords), load_wordlist(cfg.nonpolitics_keywords))
    clf = train_domain_classifier([(text, lab) for _, text, lab in labeled if lab], [t.op_text for t in threads])
    keep = clf.predict([t.op_text for t in threads])
    log.info("domain filter keeps %d of %d threads", keep.count("politics"), len(threads))
    return [t for t, lab in zip(threads, keep) if lab == "politics"]


def prepare_examples(cfg: PipelineConfig, threads, index: InvertedIndex, mode="system") -> list:
    """Retrieval, evidence sampling and gold keyphrases for every kept reply.

    Train and validation statements are the replies themselves; test
    statements are the OP in ``system`` mode and the reply in ``oracle``
    mode. Examples without any sampled evidence are dropped.
    """
    if mode not in ("system", "oracle"):
        raise ConfigError(f"unknown prepare mode {mode!r}")
    offensive = load_wordlist(cfg.offensive) if cfg.offensive else default_offensive()
    stop = cfg.stopword_set()
    ratios = tuple(int(x) for x in cfg.split_ratios.split(","))
    splits = split_dataset([t.id for t in threads], ratios, rng=np.random.default_rng(cfg.seed))
    background = []
    for t in threads:
        background.append(tokenize(t.op_text).tokens)
        background.extend(tokenize(r.text).tokens for r in t.replies)

    def run(seq):
        return retrieve_evidence(index, seq, background, cfg.sig_cutoff, cfg.top_articles, cfg.para_cap, cfg.sent_cap)

    out = []
    for n, t in enumerate(sorted(threads, key=lambda t: t.id)):
        # one stream per thread so a thread's samples do not depend on the others
        rng = np.random.default_rng([cfg.seed, n])
        replies = filter_replies(t, offensive)
        if not replies:
            continue
        split = splits[t.id]
        op = tokenize(t.op_text)
        op_res = run(op) if split == "test" and mode == "system" else None
        for reply in replies:
            arg = tokenize(reply.text)
            src, res = (op, op_res) if op_res is not None else (arg, run(arg))
            pools = [[index.sentences[i] for i in ids] for ids in res.per_sentence]
            retrieved = [s.tokens for s in res.evidence(index)]
            for sample in sample_evidence(split_sentences(src), pools, cfg.per_sent, cfg.repeats, rng):
                ev = [s.tokens for s in sample]
                kp = gold_keyphrases(ev, arg.tokens, stop).serialized
                out.append(TrainingExample(t.id, split, op.tokens, ev, kp, arg.tokens, retrieved))
    return out


def cmd_prepare(cfg: PipelineConfig, mode="system", out=None):
    cfg.require("threads", "index")
    threads = domain_filter(cfg, load_threads(cfg.threads))
    index = InvertedIndex.load(cfg.index)
    examples = prepare_examples(cfg, threads, index, mode)
    path = out or cfg.examples
    write_jsonl(path, cfg.meta("prepare", mode=mode), [e.to_json() for e in examples])
    return examples, path


# ----------------------------------------------------------------------
# train


def vocab_corpus(examples):
    for e in examples:
        yield e.statement
        yield e.evidence
        yield e.keyphrases
        yield e.argument


def cmd_train(cfg: PipelineConfig, on_epoch=None):
    cfg.require("examples")
    examples = load_examples(cfg.examples)
    tr = [e for e in examples if e.split == "train"]
    va = [e for e in examples if e.split == "valid"]
    if not tr:
        raise DataError("no training examples")
    vocab = build_vocab(vocab_corpus(tr), cfg.vocab_cap)
    mcfg = cfg.model_config(len(vocab))
    emb = None
    if cfg.embeddings:
        cfg.require("embeddings")
        emb = load_embeddings(cfg.embeddings, vocab, mcfg.embed_size, np.random.default_rng(cfg.seed), mcfg.init_scale)
    model = Seq2SeqModel(mcfg, emb)
    pretrained = None
    if cfg.pretrained:
        cfg.require("pretrained")
        pretrained, _ = load_checkpoint(cfg.pretrained)
    history = train(model, tr, vocab, cfg.curriculum(), cfg.train_config(), va, pretrained, on_epoch)
    meta = cfg.meta("train", vocab=list(vocab.itos), stages=[asdict(s) for s in cfg.curriculum()])
    save_model(cfg.checkpoint, model, meta)
    with open(cfg.checkpoint + ".history.csv", "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(cfg.meta("train"), sort_keys=True) + "\n")
        fh.write(history.to_csv())
    return model, vocab, history


# ----------------------------------------------------------------------
# generate


def check_variant(model_cfg: ModelConfig, system, flags):
    """Reject generation flags that contradict the checkpoint."""
    if system != model_cfg.system:
        raise ConfigError(f"checkpoint was trained as {model_cfg.system}, not {system}")
    for key, want in flags.items():
        if want is not None and getattr(model_cfg, key) != want:
            raise ConfigError(f"checkpoint has {key}={getattr(model_cfg, key)}, flag asks for {want}")


def distinct_inputs(examples):
    """Test examples with a distinct (op, evidence, keyphrases) input, first occurrence order."""
    seen, out = set(), []
    for e in examples:
        key = (e.op_id, e.evidence_sents, e.keyphrases)
        if e.split == "test" and key not in seen:
            seen.add(key)
            out.append(e)
    return out


_WORKER = {}


def _init_worker(checkpoint):
    model, meta = load_model(checkpoint)
    _WORKER["model"], _WORKER["vocab"], _WORKER["meta"] = model, Vocabulary(meta["vocab"]), meta


def _generate_one(args):
    idx, example, beam, stage, stop = args
    model, vocab = _WORKER["model"], _WORKER["vocab"]
    src, _, _ = stage_tokens(example, model.config, stage)
    src_ids = vocab.encode(src)
    content = {vocab.id(t) for t in content_words(src, stop) if t in vocab and t not in RESERVED}
    gen = generate(model, src_ids, beam, content, example_rng(beam.seed, idx))
    return {
        "op_id": example.op_id,
        "system": model.config.system,
        "tokens": vocab.decode(gen.tokens),
        "logprob": gen.logprob,
        "coverage": gen.coverage,
        "kp_tokens": vocab.decode(gen.kp_tokens),
        "unfinished": gen.all_unfinished,
    }


def generate_records(cfg: PipelineConfig, examples, beam: BeamConfig, checkpoint=None, jobs=None):
    checkpoint = checkpoint or cfg.checkpoint
    _, meta = load_checkpoint(checkpoint)
    stage = CurriculumStage(**meta["stages"][-1]) if meta.get("stages") else cfg.curriculum()[-1]
    stop = cfg.stopword_set()
    tasks = [(i, e, beam, stage, stop) for i, e in enumerate(examples)]
    jobs = jobs or cfg.jobs
    if jobs <= 1:
        _init_worker(checkpoint)
        return [_generate_one(t) for t in tasks]
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(checkpoint,)) as pool:
        return list(pool.map(_generate_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def retrieval_records(examples):
    """The baseline: reranked evidence sentences joined in rank order."""
    seen, out = set(), []
    for e in examples:
        if e.split != "test" or e.op_id in seen:
            continue
        seen.add(e.op_id)
        out.append({"op_id": e.op_id, "system": "retrieval", "tokens": [t for s in e.retrieved for t in s], "logprob": 0.0, "coverage": 0.0, "kp_tokens": []})
    return out


def cmd_generate(cfg: PipelineConfig, system, out, flags=None, label=None):
    cfg.require("examples")
    examples = load_examples(cfg.examples)
    if system == "retrieval":
        records = retrieval_records(examples)
        meta = cfg.meta("generate", system=system)
    else:
        cfg.require("checkpoint")
        model, _ = load_model(cfg.checkpoint)
        check_variant(model.config, system, flags or {})
        beam = cfg.beam_config(system)
        records = generate_records(cfg, distinct_inputs(examples), beam)
        meta = cfg.meta("generate", system=system, variant=asdict(model.config), beam=asdict(beam))
    if label:
        meta["label"] = label
    write_jsonl(out, meta, records)
    return records


# ----------------------------------------------------------------------
# eval


def references_by_op(examples):
    refs = {}
    for e in examples:
        if e.split == "test" and e.argument:
            bucket = refs.setdefault(e.op_id, [])
            if list(e.argument) not in bucket:
                bucket.append(list(e.argument))
    return refs


def gold_by_op(examples):
    """First test example per OP: statement, evidence, gold keyphrases."""
    out = {}
    for e in examples:
        if e.split == "test" and e.op_id not in out:
            out[e.op_id] = e
    return out


def best_per_op(records, refs, metric):
    """Among several generations for one OP keep the highest-scoring one."""
    best = {}
    for r in records:
        op = r["op_id"]
        if op not in refs:
            continue
        score = metric(r["tokens"], refs[op]) if r["tokens"] else 0.0
        if op not in best or score > best[op][0]:
            best[op] = (score, r)
    return {op: r for op, (_, r) in best.items()}


def train_relevance_model(cfg, examples, checkpoint=None):
    """Relevance ranker over train pairs; embeddings from a file or a checkpoint."""
    tr = [e for e in examples if e.split == "train"]
    if cfg.embeddings:
        vocab = build_vocab(vocab_corpus(examples), cfg.vocab_cap)
        dim = int(cfg.model.get("embed_size", 200))
        emb = load_embeddings(cfg.embeddings, vocab, dim, np.random.default_rng(cfg.seed))
    elif checkpoint and os.path.exists(checkpoint):
        tensors, meta = load_checkpoint(checkpoint)
        vocab, emb = Vocabulary(meta["vocab"]), tensors["emb"]
    else:
        return None, None
    pairs = [(e.op_id, vocab.encode(e.statement), vocab.encode(e.argument)) for e in tr]
    if len({p[0] for p in pairs}) < 2:
        return None, None
    rcfg = RelevanceConfig(projection=cfg.relevance_projection, epochs=cfg.relevance_epochs, seed=cfg.seed)
    return train_relevance(pairs, emb, rcfg), vocab


def evaluate_generations(cfg: PipelineConfig, examples, generation_sets, relevance=None, relevance_vocab=None, metric=None):
    """One report row per system from ``{name: records}``."""
    refs = references_by_op(examples)
    gold = gold_by_op(examples)
    generic = load_phrase_list(cfg.generic or None)
    metric = metric or bleu2
    rows = []
    for name, records in generation_sets.items():
        chosen = best_per_op(records, refs, metric)
        ops = sorted(chosen)
        outs = [chosen[o]["tokens"] for o in ops]
        kwargs = {}
        if relevance is not None:
            kwargs = {
                "ops": [relevance_vocab.encode(gold[o].statement) for o in ops],
                "evidence": [gold[o].evidence for o in ops],
                "relevance": _EncodedRelevance(relevance, relevance_vocab),
            }
        kp_pairs = [(chosen[o]["kp_tokens"], gold[o].keyphrases, refs[o][0]) for o in ops if chosen[o].get("kp_tokens")]
        rows.append(score_system(name, outs, [refs[o] for o in ops], generic=generic, kp_pairs=kp_pairs or None, **kwargs))
    return EvalReport(rows, cfg.meta("eval"))


class _EncodedRelevance:
    """Adapts a relevance model over ids to token-level arguments."""

    def __init__(self, model, vocab):
        self.model, self.vocab = model, vocab

    def score(self, ops, args):
        return self.model.score(ops, [self.vocab.encode(a) for a in args])


def cmd_eval(cfg: PipelineConfig, generation_paths, checkpoint=None):
    cfg.require("examples")
    examples = load_examples(cfg.examples)
    sets = {}
    for path in generation_paths:
        meta, records = read_jsonl(path)
        name = meta.get("label") or meta.get("system") or os.path.basename(path)
        if name in sets:
            name = f"{name}:{os.path.basename(path)}"
        sets[name] = records
    relevance, rvocab = train_relevance_model(cfg, examples, checkpoint or cfg.checkpoint)
    return evaluate_generations(cfg, examples, sets, relevance, rvocab)


# ----------------------------------------------------------------------
# decoder sweep


def parse_int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def cmd_sweep(cfg: PipelineConfig, ps=(5, 10, 20), ns=(1, 3, 5, 7, 10), k=10, limit=None):
    """Generate under every (p, n) and score; returns the grid cells."""
    cfg.require("examples", "checkpoint")
    examples = load_examples(cfg.examples)
    inputs = distinct_inputs(examples)[:limit] if limit else distinct_inputs(examples)
    refs = references_by_op(examples)
    model, _ = load_model(cfg.checkpoint)
    cells = []
    for p in ps:
        for n in ns:
            if not 1 <= n <= k:
                raise ConfigError(f"deterministic count {n} outside [1, {k}]")
            beam = BeamConfig(**{"seed": cfg.seed, **cfg.beam, "k": k, "n": n, "p": p, "mode": "hybrid"})
            records = generate_records(cfg, inputs, beam)
            chosen = best_per_op(records, refs, bleu2)
            ops = sorted(chosen)
            row = score_system(model.config.system, [chosen[o]["tokens"] for o in ops], [refs[o] for o in ops])
            cells.append({"p": p, "n": n, "k": k, "bleu": row.bleu, "meteor": row.meteor, "length": row.length})
    return cells


def sweep_report(cfg, cells) -> tuple:
    meta = cfg.meta("sweep-decoder")
    text = "BLEU-2\n" + sweep_table(cells, "bleu") + "\nMTR-lite\n" + sweep_table(cells, "meteor")
    return json.dumps({"meta": meta, "cells": cells}, indent=2, sort_keys=True), text


__all__ = [
    "PipelineConfig", "cmd_index", "cmd_prepare", "cmd_train", "cmd_generate", "cmd_eval", "cmd_sweep",
    "prepare_examples", "read_jsonl", "write_jsonl",
]
