"""Command-line interface: init, train, eval, compare, inspect.

Every subcommand accepts ``--config FILE`` with flat ``key=value`` lines
(keys are flag names, dashes or underscores); explicit flags win.
Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""
import argparse
import csv
import logging
import os
import sys
from collections import OrderedDict

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import ModelConfig
from .corpus import ByteTokenizer, BatchStream, encode_corpus
from .errors import (ConfigMismatch, CorruptCheckpoint, DivergenceError, InvalidInput,
                     NumericalFailure, ShapeError)
from .initializers import METHODS, initialize
from .selection import STRATEGIES, select_layers
from .training import MetricLog, TrainConfig, evaluate, gap_reduction, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def read_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidInput(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _tokenizer(args):
    return ByteTokenizer.from_vocab_file(args.vocab_file) if args.vocab_file else ByteTokenizer()


def cmd_init(args):
    teacher = ckpt_io.load(args.teacher) if args.teacher else None
    if args.method != "random" and teacher is None:
        raise ConfigMismatch(f"--method {args.method} needs --teacher")
    tok = _tokenizer(args)
    base = teacher.config if teacher is not None else None

    def dim(name):
        value = getattr(args, name)
        if value is None and base is not None:
            value = getattr(base, name)
        if value is None:
            raise InvalidInput(f"--{name.replace('_', '-')} is required without a teacher")
        return value

    config = ModelConfig(
        d_model=dim("d_model"), num_layers=dim("num_layers"), num_heads=dim("num_heads"),
        head_dim=dim("head_dim"), ffn_dim=dim("ffn_dim"),
        vocab_size=args.vocab_size or (base.vocab_size if base else tok.vocab_size),
        context_len=dim("context_len"),
    )
    layers = None
    if teacher is not None and args.method in ("guide", "uniform"):
        if config.num_layers > teacher.config.num_layers:
            raise ConfigMismatch(f"n_S <= n_T violated ({config.num_layers} > {teacher.config.num_layers})")
        layers = select_layers(args.layers, config.num_layers, teacher.config.num_layers, k=args.k)
    student, report = initialize(args.method, teacher, config, layers, args.seed,
                                 tokenizer=tok.fingerprint)
    ckpt_io.save(student, args.out)
    with open(args.out + ".report.txt", "w") as fh:
        fh.write(report.format())
    print(f"wrote {args.out} ({config.num_params()} parameters, method={args.method})")
    return EXIT_OK


def cmd_train(args):
    student = ckpt_io.load(args.student)
    teacher = ckpt_io.load(args.teacher) if args.teacher else None
    if args.distill and teacher is None:
        raise ConfigMismatch("--distill needs --teacher")
    tok = _tokenizer(args)
    if tok.fingerprint != student.tokenizer:
        raise ConfigMismatch(f"corpus tokenizer {tok.fingerprint} != checkpoint tokenizer {student.tokenizer}")
    tokens = encode_corpus(args.corpus, tok)
    L = student.config.context_len
    data = BatchStream(tokens, L, args.batch_size, seed=args.seed, split="train")
    held_out = BatchStream(tokens, L, args.batch_size, split="eval")
    cfg = TrainConfig(steps=args.steps, lr=args.lr, warmup_steps=args.warmup,
                      distill_alpha=args.alpha if args.distill else None,
                      eval_every=args.eval_every, eval_batches=args.eval_batches, seed=args.seed)
    trained, metrics = train(student, teacher, data, cfg, held_out)
    ckpt_io.save(trained, args.out)
    log_path = args.log or os.path.splitext(args.out)[0] + ".csv"
    metrics.to_csv(log_path)
    line = metrics.summary_line()
    with open(log_path + ".summary", "w") as fh:
        fh.write(line + "\n")
    print(line)
    return EXIT_OK


def cmd_eval(args):
    ckpt = ckpt_io.load(args.ckpt)
    tokens = encode_corpus(args.corpus, _tokenizer(args))
    stream = BatchStream(tokens, ckpt.config.context_len, args.batch_size, split=args.split)
    nll, ppl = evaluate(ckpt, stream, args.batches)
    print(f"nll={nll:.6f} perplexity={ppl:.6f}")
    return EXIT_OK


def _parse_runs(items):
    runs = OrderedDict()
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            raise InvalidInput(f"--run expects NAME=CSV, got {item!r}")
        runs.setdefault(name, []).append(MetricLog.from_csv(path))
    return runs


def cmd_compare(args):
    runs = _parse_runs(args.run)
    if args.teacher_log:
        teacher_ppl = MetricLog.from_csv(args.teacher_log).final.eval_ppl
    else:
        teacher_ppl = args.teacher_ppl
    finals = OrderedDict((name, [m.final.eval_ppl for m in logs]) for name, logs in runs.items())
    if args.baseline not in finals:
        raise InvalidInput(f"baseline run {args.baseline!r} not among --run names")
    baseline = float(np.mean(finals[args.baseline]))

    width = max(len(n) for n in finals) + 2
    print(f"{'method':<{width}}{'perplexity':>22}{'gap reduction (%)':>20}")
    for name, vals in finals.items():
        mean = float(np.mean(vals))
        spread = f"{mean:.3f}+-{np.std(vals):.3f}" if len(vals) > 1 else f"{mean:.3f}"
        gap = "N/A"
        if teacher_ppl is not None and name != args.baseline:
            gap = f"{gap_reduction(mean, baseline, teacher_ppl):.2f}"
        print(f"{name:<{width}}{spread:>22}{gap:>20}")
    if teacher_ppl is not None:
        print(f"{'teacher':<{width}}{teacher_ppl:>22.3f}{'N/A':>20}")

    if args.out:
        steps = sorted({r.step for logs in runs.values() for m in logs for r in m.records})
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step"] + list(runs))
            for step in steps:
                row = [step]
                for logs in runs.values():
                    vals = [r.eval_ppl for m in logs for r in m.records if r.step == step]
                    row.append(repr(float(np.mean(vals))) if vals else "")
                writer.writerow(row)
    return EXIT_OK


def cmd_inspect(args):
    meta, records = ckpt_io.read_header(args.path)
    for key, value in meta.items():
        print(f"{key}={value}")
    total = 0
    for name, dtype, shape, offset, nbytes in records:
        total += int(np.prod(shape))
        print(f"{name:<24} {dtype.str:<5} {'x'.join(map(str, shape)):<12} offset={offset} bytes={nbytes}")
    print(f"parameters={total}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="guide-init", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value file; flags override its values")
        p.add_argument("--vocab-file", help="extra tokenizer vocabulary, one token per line")

    p = sub.add_parser("init", help="initialize a student checkpoint")
    common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--teacher")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", choices=STRATEGIES, default="top")
    p.add_argument("--k", type=int, help="number of mapped layers for --layers k-even")
    for name in ("d-model", "num-layers", "num-heads", "head-dim", "ffn-dim", "vocab-size",
                 "context-len"):
        p.add_argument(f"--{name}", type=int)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="train or distill a checkpoint")
    common(p)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="MetricLog CSV path (default: next to --out)")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup", type=int)
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--eval-batches", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distill", action="store_true")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--batches", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="perplexity and gap-reduction table over runs")
    common(p)
    p.add_argument("--run", action="append", required=True, metavar="NAME=CSV",
                   help="repeat; runs sharing a NAME are averaged")
    p.add_argument("--baseline", default="random")
    p.add_argument("--teacher-ppl", type=float)
    p.add_argument("--teacher-log", help="teacher MetricLog CSV (final eval_ppl used)")
    p.add_argument("--out", help="per-step perplexity CSV for plotting")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="print a checkpoint header and tensor shapes")
    p.add_argument("path")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--vocab-file", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_inspect)
    return parser


def _preparse(argv):
    """(subcommand, --config path) found by a plain scan, before required flags are checked."""
    command = path = None
    for i, arg in enumerate(argv):
        if command is None and not arg.startswith("-"):
            command = arg
        elif arg == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif arg.startswith("--config="):
            path = arg.split("=", 1)[1]
    return command, path


def _apply_config_file(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    command, path = _preparse(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if path is None or command not in subparsers:
        return parser.parse_args(argv)
    subparser = subparsers[command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in read_config_file(path).items():
        action = known.get(key)
        if action is None or key in ("help", "config"):
            raise InvalidInput(f"{path}: unknown key {key!r} for {command}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in _BOOL:
                raise InvalidInput(f"{path}: {key} expects a boolean")
            defaults[key] = _BOOL[value.lower()]
        elif isinstance(action, argparse._AppendAction) or action.nargs == "+":
            defaults[key] = value.split()
        else:
            defaults[key] = action.type(value) if action.type else value
            if action.choices is not None and defaults[key] not in action.choices:
                raise InvalidInput(f"{path}: {key} must be one of {', '.join(action.choices)}")
        action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except (InvalidInput, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (DivergenceError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigMismatch, InvalidInput, ShapeError, CorruptCheckpoint, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
