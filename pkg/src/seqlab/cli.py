"""Command line: ``train``, ``finetune``, ``eval``, ``tag``, ``replicate``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from .config import ConfigError, TrainConfig, apply_overrides, dump_config
from .config import load_config as _load_config
from .data import DataError, Sentence, read_tokens, split_word
from .encoder import SequenceTooLong
from .runner import (evaluate, finetune_run, load_checkpoint, load_task, replicate, resume_run,
                     train_run, check_compatible)
from .training import DivergenceError

log = logging.getLogger("seqlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


def load_config(path: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    try:
        return _load_config(path, base)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    items = [kv.split("=", 1) for kv in (args.set or [])]
    for kv in items:
        if len(kv) != 2:
            raise UsageError(f"--set expects key=value, got {kv[0]!r}")
    for key in ("head", "objective", "seed", "beam"):
        value = getattr(args, key, None)
        if value is not None:
            items.append((key, str(value)))
    return apply_overrides(cfg, items).validate()


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from None


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.resume:
        run = resume_run(args.resume, cfg.epochs, args.out)
    else:
        run = train_run(cfg, args.out)
    if args.out:
        with open(os.path.join(args.out, "config.txt"), "w") as f:
            f.write(dump_config(run.model.cfg))
    print(f"best dev {run.data.metric} {run.state.best_dev:.4f} at epoch {run.state.best_epoch}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    if not args.init:
        raise UsageError("finetune needs --init CHECKPOINT from a maximum-likelihood run")
    ck = load_checkpoint(args.init)
    cfg = ck.model.cfg
    if args.config:
        cfg = load_config(args.config, cfg)
    items = [kv.split("=", 1) for kv in (args.set or [])]
    for key in ("objective", "seed", "beam"):
        value = getattr(args, key, None)
        if value is not None:
            items.append((key, str(value)))
    cfg = apply_overrides(cfg, items)
    if cfg.objective == "ml":
        cfg = cfg.replace(objective="ac")
    cfg.validate()
    data = load_task(cfg, ck.model.vocabs, ck.model.max_len)
    run = finetune_run(cfg, ck.model, args.out, data)
    print(f"best dev {run.data.metric} {run.state.best_dev:.4f} at epoch {run.state.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model.cfg
    if args.config:
        cfg = load_config(args.config, cfg)
        check_compatible(ck.meta, cfg)
    if args.set:
        cfg = apply_overrides(cfg, [kv.split("=", 1) for kv in args.set])
    data = load_task(cfg, ck.model.vocabs, ck.model.max_len)
    beam = args.beam or cfg.beam
    lines = ["split,metric,value"]
    for split in ("dev", "test"):
        if data.examples[split]:
            lines.append(f"{split},{data.metric},{evaluate(ck.model, data, split, beam)!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def _read_tag_input(path: str, mode: str, space_split: bool) -> List[List[str]]:
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    if mode == "label":
        return read_tokens(path)
    with open(path, encoding="utf-8") as f:
        return [split_word(line.split("\t")[0].strip(), space_split) for line in f if line.strip()]


def cmd_tag(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    if args.config:
        check_compatible(ck.meta, load_config(args.config, model.cfg))
    cfg = model.cfg
    beam = args.beam or cfg.beam
    inputs = _read_tag_input(args.input, cfg.mode, cfg.space_split)
    out_lines: List[str] = []
    for i in range(0, len(inputs), 64):
        chunk = inputs[i:i + 64]
        examples = [model.vocabs.encode(Sentence(toks, []), with_target=False) for toks in chunk]
        preds = model.predict(examples, beam)
        for toks, pred in zip(chunk, preds):
            labels = model.vocabs.targets.tokens(pred)
            if cfg.mode == "label":
                out_lines.extend(f"{t}\t{y}" for t, y in zip(toks, labels))
                out_lines.append("")
            else:
                sep = " " if cfg.space_split else ""
                out_lines.append(f"{sep.join(toks)}\t{sep.join(labels)}")
    text = "\n".join(out_lines) + ("\n" if out_lines else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _model_specs(specs: Optional[List[str]], heads: Optional[str]) -> Dict[str, Dict[str, object]]:
    """``--model NAME:key=value,key=value`` entries, or one ML model per head."""
    models: Dict[str, Dict[str, object]] = {}
    for spec in specs or []:
        name, _, rest = spec.partition(":")
        overrides = {}
        for kv in filter(None, rest.split(",")):
            key, eq, value = kv.partition("=")
            if not eq:
                raise UsageError(f"bad model override {kv!r} in {spec!r}")
            overrides[key.strip()] = value.strip()
        models[name] = overrides
    for head in (heads.split(",") if heads else []):
        models[head] = {"head": head, "objective": "ml"}
    if not models:
        raise UsageError("replicate needs --model or --heads")
    return models


def cmd_replicate(args) -> int:
    base = _config(args)
    seeds = _seeds(args.seeds)
    models = {}
    for name, overrides in _model_specs(args.model, args.heads).items():
        models[name] = apply_overrides(base, overrides.items()).validate().to_dict()
        models[name] = {k: v for k, v in models[name].items() if v != getattr(base, k)}
    result = replicate(base, models, seeds, args.out, args.beam)
    for (name, split), rep in result.reports.items():
        print(f"{name:>20s} {split:>4s} {rep.metric} {rep.mean:.4f} +- {rep.std:.4f}")
    for a, b, p in result.pvalues("test" if any(s == "test" for _, s in result.reports) else "dev"):
        print(f"p({a}, {b}) = {p:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_model_flags=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--beam", type=int)
        sp.add_argument("--out", help="output directory or file")
        if with_model_flags:
            sp.add_argument("--head", choices=("indp", "rnn", "crf"))
            sp.add_argument("--objective")

    sp = sub.add_parser("train", help="train from scratch (maximum likelihood)")
    common(sp)
    sp.add_argument("--resume", metavar="CHECKPOINT", help="continue from a last.npz checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune a trained model (ac, reinforce, ...)")
    common(sp, with_model_flags=False)
    sp.add_argument("--objective")
    sp.add_argument("--init", help="checkpoint of a maximum-likelihood run")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="score a checkpoint on dev and test")
    common(sp, with_model_flags=False)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("tag", help="label or transduce an input file")
    common(sp, with_model_flags=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.set_defaults(func=cmd_tag)

    sp = sub.add_parser("replicate", help="multi-seed comparison with t-tests")
    common(sp)
    sp.add_argument("--seeds", required=True, help="comma-separated seed list")
    sp.add_argument("--model", action="append", metavar="NAME:KEY=VALUE,...")
    sp.add_argument("--heads", help="comma-separated heads, each trained with ml")
    sp.set_defaults(func=cmd_replicate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DataError, SequenceTooLong) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
