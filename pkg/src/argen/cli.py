"""Command-line entry point: ``argen <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__, pipeline
from .errors import ArgenError, ConfigError

log = logging.getLogger("argen")

SYSTEMS = ("retrieval", "seq2seq", "dec-shared", "dec-separate")

# flag dest -> config key; path-valued keys are made absolute before merging
FLAG_KEYS = {
    "threads": "threads",
    "articles": "articles",
    "abstracts": "abstracts",
    "index": "index",
    "examples": "examples",
    "checkpoint": "checkpoint",
    "pretrained": "pretrained",
    "embeddings": "embeddings",
    "seed": "seed",
    "jobs": "jobs",
    "cutoff": "sig_cutoff",
    "top": "top_articles",
    "para_cap": "para_cap",
    "sent_cap": "sent_cap",
    "stages": "stages",
    "system": "model.system",
    "attend_kp": "model.attend_keyphrases",
    "encode_evd": "model.encode_evidence",
    "encode_kp": "model.encode_gold_kp",
    "hidden": "model.hidden_size",
    "embed": "model.embed_size",
    "layers": "model.layers",
    "alpha": "model.alpha",
    "keep_prob": "model.keep_prob",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "beam_k": "beam.k",
    "beam_n": "beam.n",
    "rerank_p": "beam.p",
    "max_len": "beam.max_len",
    "mode": "beam.mode",
}
PATH_FLAGS = {"threads", "articles", "abstracts", "index", "examples", "checkpoint", "pretrained", "embeddings"}


def _paths(p, *names):
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, metavar="PATH")


def _model_flags(p):
    p.add_argument("--system", choices=SYSTEMS, required=True)
    p.add_argument("--attend-kp", action="store_true", default=None, help="argument decoder also attends to keyphrase states")
    p.add_argument("--encode-evd", action="store_true", default=None, help="append evidence to the seq2seq input")
    p.add_argument("--encode-kp", action="store_true", default=None, help="append gold keyphrases to the encoder input")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="argen", description="Evidence-grounded counter-argument generation.")
    parser.add_argument("--version", action="version", version=f"argen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="build the article index")
    _paths(p, "articles")
    p.add_argument("--out", metavar="PATH", help="index file (default: config 'index')")

    p = sub.add_parser("prepare", parents=[common], help="retrieve evidence and build training examples")
    _paths(p, "threads", "index", "abstracts")
    p.add_argument("--mode", choices=("system", "oracle"), default="system")
    p.add_argument("--cutoff", type=float, help="topic signature threshold")
    p.add_argument("--top", type=int, help="articles per query")
    p.add_argument("--para-cap", type=int)
    p.add_argument("--sent-cap", type=int)
    p.add_argument("--out", metavar="PATH")

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    _paths(p, "examples", "checkpoint", "pretrained", "embeddings")
    _model_flags(p)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--keep-prob", type=float)
    p.add_argument("--epochs", help="epochs per stage, comma separated")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--stages", help="op,evd,kp,arg lengths per stage, ';' separated")

    p = sub.add_parser("generate", parents=[common], help="decode test inputs")
    _paths(p, "examples", "checkpoint")
    _model_flags(p)
    _beam_flags(p)
    p.add_argument("--label", help="row name used by eval (default: system)")
    p.add_argument("--out", metavar="PATH", required=True)

    p = sub.add_parser("eval", parents=[common], help="score generation files")
    _paths(p, "examples", "checkpoint", "embeddings")
    p.add_argument("generations", nargs="+", metavar="GENERATIONS")
    p.add_argument("--out", metavar="PATH", help="write the JSON report here")

    p = sub.add_parser("sweep-decoder", parents=[common], help="grid over rerank period and deterministic count")
    _paths(p, "examples", "checkpoint")
    p.add_argument("--ps", default="5,10,20", help="rerank periods")
    p.add_argument("--ns", default="1,3,5,7,10", help="deterministic counts")
    p.add_argument("--beam-k", type=int, default=10)
    p.add_argument("--max-len", type=int)
    p.add_argument("--limit", type=int, help="decode only the first N inputs")
    p.add_argument("--out", metavar="PATH")
    return parser


def _beam_flags(p):
    p.add_argument("--beam-k", type=int)
    p.add_argument("--beam-n", type=int)
    p.add_argument("--rerank-p", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--mode", choices=("hybrid", "standard"))


def check_combinations(args, parser):
    """Reject contradictory variant flags before any work starts."""
    system = getattr(args, "system", None)
    if system is None:
        return
    if system == "retrieval":
        if args.command == "train":
            parser.error("the retrieval baseline has nothing to train")
        used = [f for f in ("attend_kp", "encode_evd", "encode_kp") if getattr(args, f)]
        used += [f for f in ("beam_k", "beam_n", "rerank_p", "max_len", "mode") if getattr(args, f, None) is not None]
        if used:
            parser.error(f"--system retrieval takes no model or beam flags (got {', '.join(used)})")
    if system == "seq2seq" and args.attend_kp:
        parser.error("--attend-kp needs a keyphrase decoder; seq2seq has none")
    if system in ("dec-shared", "dec-separate") and args.encode_evd is False:
        parser.error("decoder systems always encode evidence")
    if getattr(args, "mode", None) == "standard" and args.beam_n is not None and args.beam_k is not None and args.beam_n != args.beam_k:
        parser.error("--mode standard expands deterministically; --beam-n must equal --beam-k")
    if getattr(args, "beam_n", None) is not None and getattr(args, "beam_k", None) is not None and args.beam_n > args.beam_k:
        parser.error("--beam-n cannot exceed --beam-k")


def _value(v):
    return str(v).lower() if isinstance(v, bool) else str(v)


def load_config(args) -> pipeline.PipelineConfig:
    """Config file first, then ``--set`` overrides, then explicit flags."""
    text, base = "", ""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        base = os.path.dirname(os.path.abspath(args.config))
    lines = [text, *args.set]
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is None or (args.command == "generate" and key.startswith("model.")):
            continue
        if args.command == "train" and dest == "system" and val == "retrieval":
            continue
        if dest in PATH_FLAGS:
            val = os.path.abspath(val)
        lines.append(f"{key}={_value(val)}")
    return pipeline.PipelineConfig.from_text("\n".join(lines), base)


def run(args, parser) -> int:
    check_combinations(args, parser)
    cfg = load_config(args)
    if args.command == "index":
        index, path = pipeline.cmd_index(cfg, args.out)
        print(f"indexed {index.n_articles} articles, {len(index.sentences)} sentences -> {path}")
    elif args.command == "prepare":
        examples, path = pipeline.cmd_prepare(cfg, args.mode, args.out)
        counts = {s: sum(e.split == s for e in examples) for s in ("train", "valid", "test")}
        print(f"{len(examples)} examples ({counts}) -> {path}")
    elif args.command == "train":
        _, _, history = pipeline.cmd_train(cfg)
        last = history.records[-1] if history.records else None
        print(f"trained {cfg.model.get('system')} -> {cfg.checkpoint}" + (f" (final train loss {last.train_loss:.4f})" if last else ""))
    elif args.command == "generate":
        flags = {"attend_keyphrases": args.attend_kp, "encode_gold_kp": args.encode_kp}
        if args.system == "seq2seq":
            flags["encode_evidence"] = args.encode_evd or False
        records = pipeline.cmd_generate(cfg, args.system, args.out, flags, args.label)
        print(f"{len(records)} generations -> {args.out}")
    elif args.command == "eval":
        report = pipeline.cmd_eval(cfg, args.generations, args.checkpoint)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(report.to_json())
        print(report.to_table(), end="")
    elif args.command == "sweep-decoder":
        if args.max_len is not None:
            cfg.beam["max_len"] = args.max_len
        ps, ns = pipeline.parse_int_list(args.ps), pipeline.parse_int_list(args.ns)
        cells = pipeline.cmd_sweep(cfg, ps, ns, args.beam_k, args.limit)
        blob, table = pipeline.sweep_report(cfg, cells)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(blob)
        print(table, end="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args, parser)
    except ArgenError as exc:
        print(f"argen: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"argen: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
