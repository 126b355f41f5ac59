"""Curriculum training, pretraining transfer and model checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError
from .model import (
    ARG_ID,
    BOS_ID,
    EOS_ID,
    History,
    LossRecord,
    ModelConfig,
    Seq2SeqModel,
    make_batch,
    parse_kv,
)
from .optim import Adam, clip_global_norm
from .text import EVD, PHRASE, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurriculumStage:
    index: int
    op: int
    evidence: int
    keyphrases: int
    argument: int


DEFAULT_STAGES = (
    CurriculumStage(1, 50, 0, 0, 30),
    CurriculumStage(2, 150, 80, 80, 80),
    CurriculumStage(3, 400, 120, 120, 120),
)


def validate_stages(stages):
    stages = list(stages)
    if not stages:
        raise ConfigError("at least one curriculum stage is required")
    first = stages[0]
    if first.evidence or first.keyphrases:
        raise ConfigError("the first stage must not include evidence or keyphrases")
    for a, b in zip(stages, stages[1:]):
        if b.index <= a.index:
            raise ConfigError("stages must be ordered by index")
        if b.op < a.op or b.evidence < a.evidence or b.keyphrases < a.keyphrases or b.argument < a.argument:
            raise ConfigError(f"truncation lengths shrink from stage {a.index} to {b.index}")
    return stages


@dataclass
class TrainConfig:
    epochs: str = "1"  # comma-separated epochs per stage, or one value for all
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 2.0
    seed: int = 0

    def epochs_per_stage(self, n_stages):
        parts = [int(p) for p in str(self.epochs).split(",") if p.strip()]
        if len(parts) == 1:
            parts = parts * n_stages
        if len(parts) != n_stages or min(parts) < 0:
            raise ConfigError(f"epochs {self.epochs!r} does not match {n_stages} stages")
        return parts

    @classmethod
    def from_kv(cls, text, **overrides):
        return cls(**{**parse_kv(text, cls), **overrides})


def _strip_trailing(seq, token):
    seq = list(seq)
    while seq and seq[-1] == token:
        seq.pop()
    return seq


def stage_tokens(example, config: ModelConfig, stage: CurriculumStage):
    """Truncated ``(source, keyphrase target or None, argument)`` tokens.

    Lengths count delimiters, so ``<evd>`` is part of the evidence budget
    and ``<phrase>`` part of the keyphrase budget.
    """
    src = list(example.statement[: stage.op])
    if config.encode_evidence and stage.evidence and example.evidence:
        src += ([EVD] + list(example.evidence))[: stage.evidence]
    if config.encode_gold_kp and stage.keyphrases and example.keyphrases:
        src += _strip_trailing(([PHRASE] + list(example.keyphrases))[: stage.keyphrases], PHRASE)
    kp = None
    if config.uses_keyphrases and stage.keyphrases:
        kp = _strip_trailing(list(example.keyphrases)[: stage.keyphrases], PHRASE)
    return src, kp, list(example.argument[: stage.argument])


def encode_items(examples, vocab: Vocabulary, config, stage):
    items = []
    for ex in examples:
        src, kp, arg = stage_tokens(ex, config, stage)
        items.append((vocab.encode(src), None if kp is None else vocab.encode(kp), vocab.encode(arg)))
    return items


def batches(items, batch_size, rng=None):
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for i in range(0, len(items), batch_size):
        yield [items[j] for j in order[i : i + batch_size]]


def mean_loss(model, items, batch_size=32):
    """Token-weighted average of batch losses with dropout off."""
    if not items:
        return None
    saved = model.dropout.training
    model.dropout.training = False
    try:
        total = n = 0.0
        for chunk in batches(items, batch_size):
            total += model.joint_loss(make_batch(chunk, model.config)).item() * len(chunk)
            n += len(chunk)
    finally:
        model.dropout.training = saved
    return total / n


def train(model: Seq2SeqModel, train_examples, vocab, stages=DEFAULT_STAGES, tcfg=None, valid_examples=(), pretrained=None, on_epoch=None) -> History:
    """Curriculum training with Adam and global-norm clipping.

    ``train_examples`` may be TrainingExample objects (encoded per stage)
    or already-encoded ``(src, kp, arg)`` id triples used as-is.
    """
    tcfg = tcfg or TrainConfig()
    stages = validate_stages(stages)
    epochs = tcfg.epochs_per_stage(len(stages))
    if pretrained is not None:
        transfer_first_layer(model, pretrained)
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(model.parameters(), lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.adam_eps)
    history = History()
    epoch = 0
    for stage, n_epochs in zip(stages, epochs):
        items = _prepare(train_examples, vocab, model.config, stage)
        if not items:
            raise DataError("no training examples")
        valid = _prepare(valid_examples, vocab, model.config, stage)
        for _ in range(n_epochs):
            epoch += 1
            model.dropout.training = True
            losses = []
            for chunk in batches(items, tcfg.batch_size, rng):
                batch = make_batch(chunk, model.config)
                opt.zero_grad()
                with Tape() as tape:
                    loss = model.joint_loss(batch)
                tape.backward(loss)
                clip_global_norm(model.parameters(), tcfg.clip_norm)
                opt.step()
                losses.append((loss.item(), len(chunk)))
            model.dropout.training = False
            train_loss = sum(l * n for l, n in losses) / sum(n for _, n in losses)
            rec = LossRecord(epoch, stage.index, train_loss, mean_loss(model, valid, tcfg.batch_size))
            history.records.append(rec)
            log.info("epoch %d stage %d train %.4f valid %s", epoch, stage.index, train_loss, rec.valid_loss)
            if on_epoch is not None and on_epoch(rec) is False:
                return history
    return history


def _prepare(examples, vocab, config, stage):
    examples = list(examples)
    if examples and isinstance(examples[0], tuple) and len(examples[0]) == 3 and isinstance(examples[0][0], list):
        return examples
    return encode_items(examples, vocab, config, stage)


def transfer_first_layer(model: Seq2SeqModel, pretrained: dict) -> list:
    """Copy first-layer parameters of a pretrained seq2seq model.

    Covers the embedding table, both first-layer encoder directions and
    the first argument-decoder layer; keyphrase-decoder parameters are
    never touched, and tensors whose shapes differ are skipped.
    """
    copied = []
    for name, p in model.params.items():
        first = name == "emb" or name.startswith(("enc.l0.", "argdec.l0."))
        if not first or name not in pretrained:
            continue
        if pretrained[name].shape != p.shape:
            log.warning("pretrained %s has shape %s, model %s; not copied", name, pretrained[name].shape, p.shape)
            continue
        p.data = np.array(pretrained[name], dtype=np.float64)
        copied.append(name)
    return copied


def save_model(path, model: Seq2SeqModel, extra_meta=None):
    meta = {"model_config": asdict(model.config), **(extra_meta or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple:
    tensors, meta = load_checkpoint(path)
    try:
        config = ModelConfig(**meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: checkpoint lacks a model config") from exc
    model = Seq2SeqModel(config)
    model.load_state_dict(tensors)
    return model, meta


def load_embeddings(path, vocab: Vocabulary, dim, rng=None, scale=0.1):
    """Whitespace-delimited ``token v1 .. vd`` lines; unknown rows stay uniform."""
    rng = rng or np.random.default_rng(0)
    table = rng.uniform(-scale, scale, size=(len(vocab), dim))
    found = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            if parts[0] in vocab:
                table[vocab.id(parts[0])] = [float(x) for x in parts[1:]]
                found += 1
    log.info("loaded %d pretrained vectors", found)
    return table


def greedy_decode(model: Seq2SeqModel, src_ids, max_len=50, with_keyphrases=True):
    """Argmax decoding of keyphrases (when the model has them) then the argument."""
    ctx = model.start(src_ids)
    kp_ids, kp_mem, state = [], None, None
    cfg = model.config
    if cfg.uses_keyphrases and with_keyphrases:
        dec = model.kp_decoder()
        end = ARG_ID if cfg.shared_decoder else EOS_ID
        kp_ids, kp_states, state = _greedy(ctx, dec, ctx.initial_state(dec), BOS_ID, end, max_len, "zero" if cfg.shared_decoder else "attend")
        if cfg.attend_keyphrases:
            kp_mem = ctx.keyphrase_memory(kp_states)
        start = end if cfg.shared_decoder else BOS_ID
        if not cfg.shared_decoder:
            state = None
    else:
        start = BOS_ID
    if state is None:
        state = ctx.initial_state("argdec")
    mode = "attend" if kp_mem is not None else "zero"
    arg_ids, _, _ = _greedy(ctx, "argdec", state, start, EOS_ID, max_len, mode, kp_mem)
    return kp_ids, arg_ids


def _greedy(ctx, dec, state, start, end, max_len, kp_context, kp_mem=None):
    out, tops = [], []
    prev = start
    for _ in range(max_len):
        (state,), probs = ctx.step(dec, [state], [prev], kp_mem, kp_context)
        tops.append(state.top.data)
        prev = int(np.argmax(probs[0]))
        if prev == end:
            break
        out.append(prev)
    return out, np.stack(tops, axis=1), state


def history_to_json(history: History) -> str:
    return json.dumps([asdict(r) for r in history.records])
