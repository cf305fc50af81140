"""Command line entry point wiring the pipeline stages.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Log verbosity comes from the ASMLM_LOG environment variable
(error/warn/info/debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import corpus as corpus_mod
from . import embedder, evalkit, model as model_mod, sampler, trainer
from . import tokenizer as tok
from .errors import AsmlmError, DataError, NumericError, UsageError

log = logging.getLogger("asmlm")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


@dataclasses.dataclass
class PipelineConfig:
    """One JSON document covering model, trainer and sampler settings.
    Unknown keys are rejected; command-line flags win over file values."""
    # model
    hidden_dim: int = 128
    num_layers: int = 12
    num_heads: int = 8
    ffn_dim: int = 512
    max_len: int = 40
    dropout_rate: float = 0.1
    task_set: tuple = ("MLM", "CWP", "DUP")
    # trainer
    batch_size: int = 32
    total_steps: int = 2000
    learning_rate: float = 1e-4
    warmup_steps: int | None = None
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    gradient_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    # sampler
    cwp_window: int = 4
    mask_rate: float = 0.15
    # optional paths (normally given as flags; flags win)
    samples: str = ""
    vocab: str = ""
    out: str = ""

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"{path}: unknown config key(s) {sorted(unknown)}")
        return cls(**doc)

    def model_config(self, vocab_size: int) -> model_mod.ModelConfig:
        return model_mod.ModelConfig(
            vocab_size=vocab_size, hidden_dim=self.hidden_dim,
            num_layers=self.num_layers, num_heads=self.num_heads,
            ffn_dim=self.ffn_dim, max_len=self.max_len,
            dropout_rate=self.dropout_rate, task_set=frozenset(self.task_set))

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            batch_size=self.batch_size, total_steps=self.total_steps,
            learning_rate=self.learning_rate, warmup_steps=self.warmup_steps,
            weight_decay=self.weight_decay, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_epsilon=self.adam_epsilon,
            gradient_clip_norm=self.gradient_clip_norm, seed=self.seed,
            task_set=tuple(self.task_set), eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_ckpt(ckpt_dir):
    params, step, seed, _ = model_mod.load_checkpoint(ckpt_dir)
    vocab_path = os.path.join(ckpt_dir, "vocab.json")
    if not os.path.exists(vocab_path):
        raise DataError(f"{ckpt_dir}: missing vocab.json")
    return params, tok.Vocabulary.load(vocab_path)


def cmd_tokenize(args) -> int:
    corpus = corpus_mod.load_corpus(args.input)
    vocab = tok.Vocabulary.load(args.vocab)
    with open(args.out, "w", encoding="utf-8") as fh:
        for insn in corpus.all_instructions():
            seq = tok.tokenize_normalized(insn.text)
            fh.write(json.dumps({"text": insn.text,
                                 "tokens": seq.surfaces(),
                                 "ids": tok.encode(seq, vocab)}) + "\n")
    return 0


def cmd_build_vocab(args) -> int:
    corpus = corpus_mod.load_corpus(args.input)
    vocab = tok.build_vocab(corpus, args.min_count)
    vocab.save(args.out)
    log.info("vocabulary of %d tokens written to %s", vocab.size, args.out)
    return 0


def cmd_sample(args) -> int:
    corpus = corpus_mod.load_corpus(args.input)
    vocab = tok.Vocabulary.load(args.vocab)
    n_cwp = args.n // 2
    n_dup = args.n - n_cwp
    samples = sampler.sample_cwp_pairs(corpus, args.cwp_window, n_cwp,
                                       args.seed, vocab)
    samples += sampler.sample_dup_pairs(corpus, n_dup, args.seed + 1, vocab)
    sampler.write_samples(args.out, samples)
    log.info("wrote %d samples (%d CWP, %d DUP) to %s",
             len(samples), n_cwp, n_dup, args.out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.total_steps = args.steps
    vocab = tok.Vocabulary.load(args.vocab)
    samples = sampler.read_samples(args.samples)
    mcfg = cfg.model_config(vocab.size)
    tcfg = cfg.train_config()
    params = model_mod.init_params(mcfg, cfg.seed)
    stream = sampler.batch_stream(samples, vocab, tcfg.batch_size,
                                  mcfg.max_len, cfg.seed, tcfg.total_steps,
                                  mask_rate=cfg.mask_rate)
    os.makedirs(args.out, exist_ok=True)
    shutil.copyfile(args.vocab, os.path.join(args.out, "vocab.json"))
    params, history = trainer.train(params, stream, tcfg, ckpt_dir=args.out)
    trainer.write_metrics(os.path.join(args.out, "metrics.csv"), history)
    log.info("final loss %.4f after %d steps", history[-1].loss, len(history))
    return 0


def cmd_embed(args) -> int:
    params, vocab = _load_ckpt(args.ckpt)
    corpus = corpus_mod.load_corpus(args.input)
    seen = {}
    for insn in corpus.all_instructions():
        if insn.text not in seen:
            seen[insn.text] = tok.instruction_key(insn.text)
    vectors = embedder.embed_keys(params, sorted(set(seen.values())), vocab)
    with open(args.out, "w", encoding="utf-8") as fh:
        for text, key in seen.items():
            fh.write(json.dumps({"text": text,
                                 "vec": list(vectors[key])}) + "\n")
    return 0


def cmd_export_table(args) -> int:
    params, vocab = _load_ckpt(args.ckpt)
    corpus = corpus_mod.load_corpus(args.corpus)
    table = embedder.export_table(
        params, corpus, vocab, args.top_n,
        metadata={"checkpoint": model_mod.checkpoint_hash(args.ckpt)})
    embedder.write_table(args.out, table)
    log.info("wrote %d entries to %s", len(table.entries), args.out)
    return 0


def cmd_eval_outlier(args) -> int:
    params, vocab = _load_ckpt(args.ckpt)
    corpus = corpus_mod.load_corpus(args.corpus)
    sets = evalkit.generate_outlier_sets(corpus, args.taxonomy, args.n, args.seed)
    keys = sorted({m for s in sets for m in s.members})
    cache = embedder.embed_keys(params,
                                sorted({tok.instruction_key(k) for k in keys}),
                                vocab)
    embed = lambda text: cache[tok.instruction_key(text)]
    accuracy, per_category = evalkit.outlier_accuracy(sets, embed)
    report = {"taxonomy": args.taxonomy, "n_sets": len(sets),
              "accuracy": accuracy, "per_category": per_category,
              "seed": args.seed}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"{args.taxonomy} outlier accuracy: {accuracy:.4f}")
    return 0


def cmd_eval_bbsearch(args) -> int:
    params, vocab = _load_ckpt(args.ckpt)
    corpus = corpus_mod.load_corpus(args.corpus)
    task = evalkit.load_block_search_task(corpus, args.truth)
    cache: dict = {}
    embed_block = lambda b: embedder.embed_block(params, b, vocab, cache)
    points, auc = evalkit.block_search_auc(task, embed_block)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("fpr,tpr\n")
        for fpr, tpr in points:
            fh.write(f"{fpr:.6f},{tpr:.6f}\n")
        fh.write(f"# auc={auc:.6f}\n")
    print(f"block search AUC: {auc:.4f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="asmlm",
                     description="Assembly language model toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("tokenize", help="tokenize a corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("build-vocab", help="build a vocabulary")
    p.add_argument("--input", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("sample", help="generate training pairs")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--cwp-window", type=int, default=4)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("pretrain", help="run pre-training")
    p.add_argument("--samples", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("embed", help="embed corpus instructions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("export-table", help="export a static lookup table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--top-n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_table)

    p = sub.add_parser("eval", help="intrinsic evaluations")
    esub = p.add_subparsers(dest="eval_command")
    e = esub.add_parser("outlier")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--taxonomy", choices=("opcode", "operand"), required=True)
    e.add_argument("--n", type=int, default=50000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval_outlier)
    e = esub.add_parser("bbsearch")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval_bbsearch)

    return parser


def run(argv) -> int:
    level = _LOG_LEVELS.get(os.environ.get("ASMLM_LOG", "warn").lower(),
                            logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, AsmlmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
