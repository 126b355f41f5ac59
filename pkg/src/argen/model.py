"""Attentional encoder-decoder with a keyphrase decoder and dual attention.

Shapes follow a batch-first convention: token ids are (B, T), encoder
states (B, T, 2H), decoder states (B, H). Padding is handled with 0/1
masks; padded encoder steps carry the previous state forward, so the
final state of every row is the state at its own last token.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Dropout, Parameter, Tensor
from .errors import ConfigError, DataError, DimensionError
from .text import ARG, BOS, EOS, EVD, PAD, PHRASE, RESERVED

PAD_ID, UNK_ID, BOS_ID, EOS_ID, EVD_ID, ARG_ID, PHRASE_ID = (RESERVED.index(t) for t in (PAD, "<unk>", BOS, EOS, EVD, ARG, PHRASE))

SYSTEMS = ("seq2seq", "dec-shared", "dec-separate")


class ContractError(DataError):
    """A caller broke an operation's precondition."""


@dataclass
class ModelConfig:
    vocab_size: int = 50_000
    hidden_size: int = 200
    embed_size: int = 200
    layers: int = 2
    keep_prob: float = 0.8
    alpha: float = 0.5
    system: str = "dec-separate"
    attend_keyphrases: bool = False
    encode_evidence: bool = True
    encode_gold_kp: bool = False
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must lie in (0, 1]")
        if min(self.vocab_size - len(RESERVED), self.hidden_size, self.embed_size, self.layers) < 1:
            raise ConfigError("sizes must be positive and the vocabulary must exceed the reserved tokens")
        if self.attend_keyphrases and self.system == "seq2seq":
            raise ConfigError("seq2seq has no keyphrase decoder to attend to")

    @property
    def shared_decoder(self):
        return self.system == "dec-shared"

    @property
    def uses_keyphrases(self):
        return self.system != "seq2seq"

    def to_kv(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str, **overrides) -> "ModelConfig":
        return cls(**{**parse_kv(text, cls), **overrides})


def parse_kv(text, cls):
    """Parse ``key=value`` lines into typed fields of dataclass ``cls``."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = coerce(val, types[key], key)
    return out


def coerce(val, typ, key):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return val


# ----------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Padded id arrays for one training step."""

    src: np.ndarray
    src_mask: np.ndarray
    arg_in: np.ndarray
    arg_out: np.ndarray
    arg_mask: np.ndarray
    kp_in: np.ndarray | None = None
    kp_out: np.ndarray | None = None
    kp_mask: np.ndarray | None = None

    @property
    def size(self):
        return self.src.shape[0]


def _pad(seqs, value=PAD_ID):
    width = max(len(s) for s in seqs)
    arr = np.full((len(seqs), width), value, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return arr, mask


def make_batch(items, config: ModelConfig) -> Batch:
    """``items`` are ``(src_ids, kp_ids or None, arg_ids)`` triples.

    Keyphrase targets are dropped (stage without keyphrases) when every
    item has ``kp_ids`` None or the model has no keyphrase decoder.
    """
    if not items:
        raise DataError("empty batch")
    if any(len(src) == 0 for src, _, _ in items):
        raise DataError("empty encoder input")
    src, src_mask = _pad([s for s, _, _ in items])
    use_kp = config.uses_keyphrases and any(k is not None for _, k, _ in items)
    kp_in = kp_out = kp_mask = None
    if use_kp:
        end = ARG_ID if config.shared_decoder else EOS_ID
        kps = [list(k or ()) for _, k, _ in items]
        kp_in, kp_mask = _pad([[BOS_ID] + k for k in kps])
        kp_out, _ = _pad([k + [end] for k in kps])
    start = ARG_ID if (config.shared_decoder and use_kp) else BOS_ID
    args = [list(a) for _, _, a in items]
    arg_in, arg_mask = _pad([[start] + a for a in args])
    arg_out, _ = _pad([a + [EOS_ID] for a in args])
    return Batch(src, src_mask, arg_in, arg_out, arg_mask, kp_in, kp_out, kp_mask)


# ----------------------------------------------------------------------
# the network


@dataclass
class EncoderOutput:
    states: Tensor  # (B, T, 2H)
    mask: np.ndarray  # (B, T)
    finals: list  # per layer: (h (B, 2H), c (B, 2H))


@dataclass
class Memory:
    """Attention memory: projected keys (B, T, A), values (B, T, D), mask."""

    keys: Tensor
    values: Tensor
    mask: np.ndarray

    def take(self, rows):
        return Memory(Tensor(self.keys.data[rows]), Tensor(self.values.data[rows]), self.mask[rows])


@dataclass
class DecoderState:
    layers: list  # per layer (h, c)

    @property
    def top(self):
        return self.layers[-1][0]


@dataclass
class StepOutput:
    state: DecoderState
    readout: Tensor
    alpha: np.ndarray
    alpha_kp: np.ndarray | None = None


def attend(query: Tensor, memory: Memory, w_s: Tensor, v: Tensor):
    """Additive attention, returns ``(context (B, D), weights (B, T))``.

    ``memory.keys`` already holds ``W_h h_j + b`` so only the query
    projection is computed per step.
    """
    b, t, a = memory.keys.shape
    if query.shape[0] != b or w_s.shape != (query.shape[-1], a) or v.shape != (a,):
        raise DimensionError(f"attend: query {query.shape}, keys {memory.keys.shape}, W_s {w_s.shape}, v {v.shape}")
    q = ag.reshape(ag.matmul(query, w_s), (b, 1, a))
    e = ag.matmul(ag.tanh(memory.keys + q), ag.reshape(v, (a, 1)))
    weights = ag.softmax(ag.reshape(e, (b, t)), memory.mask)
    return ag.weighted_sum(weights, memory.values), weights


class Seq2SeqModel:
    def __init__(self, config: ModelConfig, embeddings=None):
        config.validate()
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.params = {}
        self.dropout = Dropout(config.keep_prob, seed=config.seed + 1)
        h, e, v = config.hidden_size, config.embed_size, config.vocab_size
        emb = self._uniform((v, e)) if embeddings is None else np.asarray(embeddings, dtype=np.float64)
        if emb.shape != (v, e):
            raise DimensionError(f"embedding table {emb.shape}, expected {(v, e)}")
        self._add("emb", emb)
        for layer in range(config.layers):
            d_in = e if layer == 0 else 2 * h
            for d in ("f", "b"):
                self._lstm(f"enc.l{layer}.{d}", d_in, h)
        self.decoders = ["argdec"] if not config.uses_keyphrases or config.shared_decoder else ["kpdec", "argdec"]
        for name in self.decoders:
            extra = h if config.attend_keyphrases and name == "argdec" else 0
            self._decoder(name, extra)
        if config.attend_keyphrases:
            self._add("kattn.w_p", self._uniform((h, h)))
            self._add("kattn.w_a", self._uniform((h, h)))
            self._add("kattn.v", self._uniform((h,)))
            self._add("kattn.b", np.zeros(h))
        self.trace = None  # set to a list to record attention weights

    # -- construction ------------------------------------------------

    def _uniform(self, shape):
        s = self.config.init_scale
        return self.rng.uniform(-s, s, size=shape)

    def _add(self, name, value):
        self.params[name] = Parameter(name, value)

    def _lstm(self, prefix, d_in, h):
        self._add(f"{prefix}.wx", self._uniform((d_in, 4 * h)))
        self._add(f"{prefix}.wh", self._uniform((h, 4 * h)))
        self._add(f"{prefix}.b", np.zeros(4 * h))

    def _decoder(self, name, kp_ctx):
        cfg = self.config
        h, e, v = cfg.hidden_size, cfg.embed_size, cfg.vocab_size
        for layer in range(cfg.layers):
            self._add(f"{name}.bridge.l{layer}.wh", self._uniform((2 * h, h)))
            self._add(f"{name}.bridge.l{layer}.bh", np.zeros(h))
            self._add(f"{name}.bridge.l{layer}.wc", self._uniform((2 * h, h)))
            self._add(f"{name}.bridge.l{layer}.bc", np.zeros(h))
            self._lstm(f"{name}.l{layer}", e + 2 * h + kp_ctx if layer == 0 else h, h)
        self._add(f"{name}.attn.w_h", self._uniform((2 * h, h)))
        self._add(f"{name}.attn.w_s", self._uniform((h, h)))
        self._add(f"{name}.attn.v", self._uniform((h,)))
        self._add(f"{name}.attn.b", np.zeros(h))
        self._add(f"{name}.out.w_r", self._uniform((h + 2 * h + kp_ctx, h)))
        self._add(f"{name}.out.b_r", np.zeros(h))
        self._add(f"{name}.out.w_o", self._uniform((h, v)))
        self._add(f"{name}.out.b_o", np.zeros(v))

    def p(self, name):
        return self.params[name]

    def parameters(self):
        return [self.params[k] for k in self.params]

    def kp_decoder(self):
        return "argdec" if self.config.shared_decoder else "kpdec"

    # -- encoder -----------------------------------------------------

    def _run_lstm(self, prefix, inputs, mask, reverse):
        b = inputs[0].shape[0]
        h_dim = self.config.hidden_size
        h = c = Tensor(np.zeros((b, h_dim)))
        outs = [None] * len(inputs)
        order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
        for t in order:
            h_new, c_new = ag.lstm_cell(inputs[t], h, c, self.p(f"{prefix}.wx"), self.p(f"{prefix}.wh"), self.p(f"{prefix}.b"))
            m = mask[:, t : t + 1]
            if m.all():
                h, c = h_new, c_new
            else:
                h, c = ag.where_mask(m, h_new, h), ag.where_mask(m, c_new, c)
            outs[t] = h
        return outs, (h, c)

    def encode(self, src, src_mask=None) -> EncoderOutput:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src.shape[1] == 0:
            raise DataError("empty encoder input")
        mask = np.ones(src.shape) if src_mask is None else np.asarray(src_mask, dtype=np.float64)
        emb = ag.embedding(self.p("emb"), src)
        inputs = [self.dropout(_slice_t(emb, t)) for t in range(src.shape[1])]
        finals = []
        for layer in range(self.config.layers):
            fw, (hf, cf) = self._run_lstm(f"enc.l{layer}.f", inputs, mask, reverse=False)
            bw, (hb, cb) = self._run_lstm(f"enc.l{layer}.b", inputs, mask, reverse=True)
            outs = [ag.concat([a, b_]) for a, b_ in zip(fw, bw)]
            finals.append((ag.concat([hf, hb]), ag.concat([cf, cb])))
            inputs = [self.dropout(o) for o in outs] if layer + 1 < self.config.layers else outs
        return EncoderOutput(ag.stack(inputs, axis=1), mask, finals)

    # -- decoder -----------------------------------------------------

    def init_state(self, dec, enc: EncoderOutput) -> DecoderState:
        layers = []
        for layer, (hf, cf) in enumerate(enc.finals):
            pre = f"{dec}.bridge.l{layer}"
            h = ag.matmul(hf, self.p(f"{pre}.wh")) + self.p(f"{pre}.bh")
            c = ag.matmul(cf, self.p(f"{pre}.wc")) + self.p(f"{pre}.bc")
            layers.append((h, c))
        return DecoderState(layers)

    def encoder_memory(self, dec, enc: EncoderOutput) -> Memory:
        keys = ag.matmul(enc.states, self.p(f"{dec}.attn.w_h")) + self.p(f"{dec}.attn.b")
        return Memory(keys, enc.states, enc.mask)

    def keyphrase_memory(self, kp_states: Tensor, kp_mask) -> Memory:
        """Memory over keyphrase-decoder top states (B, Tp, H)."""
        keys = ag.matmul(kp_states, self.p("kattn.w_p")) + self.p("kattn.b")
        return Memory(keys, kp_states, np.asarray(kp_mask, dtype=np.float64))

    def decoder_step(self, dec, state: DecoderState, prev_ids, memory: Memory, kp_memory=None, kp_context="attend") -> StepOutput:
        """One step of decoder ``dec``.

        Attention queries use the previous top-layer state. For the
        argument decoder with keyphrase attention on, ``kp_context``
        selects between attending ``kp_memory`` (``"attend"``) and a zero
        keyphrase context (``"zero"``: shared-decoder keyphrase phase, or
        a curriculum stage without keyphrases).
        """
        cfg = self.config
        s_prev = state.top
        ctx, alpha = attend(s_prev, memory, self.p(f"{dec}.attn.w_s"), self.p(f"{dec}.attn.v"))
        parts = [ag.embedding(self.p("emb"), np.asarray(prev_ids, dtype=np.int64)), ctx]
        alpha_kp = None
        if cfg.attend_keyphrases and dec == "argdec":
            if kp_context == "zero":
                kctx = Tensor(np.zeros((s_prev.shape[0], cfg.hidden_size)))
            else:
                if kp_memory is None or kp_memory.values.shape[1] == 0:
                    raise ContractError("keyphrase attention is on but no keyphrase states were given")
                kctx, alpha_kp = attend(s_prev, kp_memory, self.p("kattn.w_a"), self.p("kattn.v"))
            parts.append(kctx)
        x = self.dropout(ag.concat(parts))
        layers = []
        for layer, (h, c) in enumerate(state.layers):
            pre = f"{dec}.l{layer}"
            h, c = ag.lstm_cell(x, h, c, self.p(f"{pre}.wx"), self.p(f"{pre}.wh"), self.p(f"{pre}.b"))
            layers.append((h, c))
            x = self.dropout(h) if layer + 1 < len(state.layers) else h
        readout = ag.concat([h] + parts[1:])
        if self.trace is not None:
            self.trace.append((alpha.data.copy(), None if alpha_kp is None else alpha_kp.data.copy()))
        return StepOutput(DecoderState(layers), readout, alpha.data, None if alpha_kp is None else alpha_kp.data)

    def output_probs(self, dec, readout: Tensor) -> Tensor:
        """Vocabulary distribution for readouts of shape (N, D)."""
        hid = ag.tanh(ag.matmul(readout, self.p(f"{dec}.out.w_r")) + self.p(f"{dec}.out.b_r"))
        return ag.softmax(ag.matmul(hid, self.p(f"{dec}.out.w_o")) + self.p(f"{dec}.out.b_o"))

    def run_decoder(self, dec, state, in_ids, mask, memory, kp_memory=None, kp_context="attend"):
        """Teacher-forced pass. Returns (readouts, top states, final state).

        Steps where ``mask`` is 0 carry the previous state, so the final
        state of each row is the one after its last real token.
        """
        readouts, tops = [], []
        for t in range(in_ids.shape[1]):
            out = self.decoder_step(dec, state, in_ids[:, t], memory, kp_memory, kp_context)
            m = mask[:, t : t + 1]
            if m.all():
                state = out.state
            else:
                state = DecoderState([(ag.where_mask(m, h, h0), ag.where_mask(m, c, c0)) for (h, c), (h0, c0) in zip(out.state.layers, state.layers)])
            readouts.append(out.readout)
            tops.append(out.state.top)
        return readouts, tops, state

    def _nll(self, dec, readouts, targets, mask):
        r = ag.stack(readouts, axis=1)
        b, t, d = r.shape
        probs = self.output_probs(dec, ag.reshape(r, (b * t, d)))
        return ag.cross_entropy(probs, targets.reshape(-1), weights=mask.reshape(-1))

    # -- training objective -----------------------------------------

    def joint_loss(self, batch: Batch) -> Tensor:
        """Weighted keyphrase and argument NLL, each over its total target length in the batch.

        Without keyphrase targets (seq2seq, or a stage that drops them)
        the loss is the argument NLL over its length.
        """
        if batch.size == 0:
            raise DataError("empty batch")
        cfg = self.config
        self.dropout.begin_pass()
        enc = self.encode(batch.src, batch.src_mask)
        has_kp = batch.kp_in is not None
        kp_mem = None
        terms = []
        arg_state = None
        if has_kp:
            dec = self.kp_decoder()
            mem = self.encoder_memory(dec, enc)
            ctx_mode = "zero" if dec == "argdec" else "attend"
            readouts, tops, final = self.run_decoder(dec, self.init_state(dec, enc), batch.kp_in, batch.kp_mask, mem, kp_context=ctx_mode)
            t_p = batch.kp_mask.sum()
            terms.append(ag.scale(self._nll(dec, readouts, batch.kp_out, batch.kp_mask), cfg.alpha / t_p))
            if cfg.attend_keyphrases:
                kp_mem = self.keyphrase_memory(ag.stack(tops, axis=1), batch.kp_mask)
            if cfg.shared_decoder:
                arg_state = final
        mem = self.encoder_memory("argdec", enc)
        if arg_state is None:
            arg_state = self.init_state("argdec", enc)
        readouts, _, _ = self.run_decoder(
            "argdec", arg_state, batch.arg_in, batch.arg_mask, mem, kp_mem, "attend" if kp_mem is not None else "zero"
        )
        t_a = batch.arg_mask.sum()
        w_arg = (1.0 - cfg.alpha) if has_kp else 1.0
        terms.append(ag.scale(self._nll("argdec", readouts, batch.arg_out, batch.arg_mask), w_arg / t_a))
        return terms[0] if len(terms) == 1 else terms[0] + terms[1]

    # -- inference ---------------------------------------------------

    def start(self, src_ids) -> "InferenceContext":
        """Encode one input for decoding (no tape, dropout off)."""
        saved = self.dropout.training
        self.dropout.training = False
        try:
            enc = self.encode(np.asarray([src_ids], dtype=np.int64))
        finally:
            self.dropout.training = saved
        return InferenceContext(self, enc)

    def state_dict(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, tensors):
        missing = sorted(set(self.params) - set(tensors))
        extra = sorted(set(tensors) - set(self.params))
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, arr in tensors.items():
            if arr.shape != self.params[k].shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape}, model expects {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)


def _slice_t(x: Tensor, t: int) -> Tensor:
    """``x[:, t]`` of a (B, T, D) tensor as a differentiable op."""
    out = Tensor(x.data[:, t])

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, t] = g
        return (full,)

    ag._record((out,), (x,), backward)
    return out


class InferenceContext:
    """Encoder output of one input plus helpers for step-wise decoding.

    Hypothesis states are plain ``DecoderState`` objects for a single
    row; :meth:`step` batches any number of them.
    """

    def __init__(self, model: Seq2SeqModel, enc: EncoderOutput):
        self.model = model
        self.enc = enc
        self.memories = {d: model.encoder_memory(d, enc) for d in model.decoders}

    def initial_state(self, dec) -> DecoderState:
        return self.model.init_state(dec, self.enc)

    def step(self, dec, states, prev_ids, kp_memory=None, kp_context="attend"):
        """Advance each state by one token. Returns (new states, probs (K, V))."""
        k = len(states)
        rows = np.zeros(k, dtype=np.int64)
        layers = []
        for layer in range(len(states[0].layers)):
            h = Tensor(np.concatenate([s.layers[layer][0].data for s in states]))
            c = Tensor(np.concatenate([s.layers[layer][1].data for s in states]))
            layers.append((h, c))
        kp_mem = None if kp_memory is None else kp_memory.take(rows)
        out = self.model.decoder_step(dec, DecoderState(layers), prev_ids, self.memories[dec].take(rows), kp_mem, kp_context)
        probs = self.model.output_probs(dec, out.readout).data
        new = [DecoderState([(Tensor(h.data[i : i + 1]), Tensor(c.data[i : i + 1])) for h, c in out.state.layers]) for i in range(k)]
        return new, probs

    def teacher_force(self, dec, state, ids, kp_context="attend"):
        """Run ``dec`` over given ids; returns (top states (1, T, H), final state)."""
        m = self.model
        tops = []
        for tok in ids:
            out = m.decoder_step(dec, state, [tok], self.memories[dec], None, kp_context)
            state = out.state
            tops.append(state.top.data)
        return np.stack(tops, axis=1) if tops else np.zeros((1, 0, m.config.hidden_size)), state

    def keyphrase_memory(self, kp_states):
        return self.model.keyphrase_memory(Tensor(kp_states), np.ones(kp_states.shape[:2]))


@dataclass
class LossRecord:
    epoch: int
    stage: int
    train_loss: float
    valid_loss: float | None = None


@dataclass
class History:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,stage,train_loss,valid_loss"]
        for r in self.records:
            v = "" if r.valid_loss is None else f"{r.valid_loss:.6f}"
            lines.append(f"{r.epoch},{r.stage},{r.train_loss:.6f},{v}")
        return "\n".join(lines) + "\n"
