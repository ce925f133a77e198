"""Task setup, the epoch loop, checkpoints and multi-seed replication."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, TrainConfig
from .data import (DataError, LabeledExample, Sentence, Vocabs, bilou_encode, iob1_to_bio,
                   read_column_corpus, read_pairs, synth_markov_task, synth_transliteration_task)
from .evaluation import EvalReport, resolve_metric, score, t_test
from .model import SequenceModel
from .training import AdamState, Optimizers, train_step

CHECKPOINT_VERSION = 1
METRIC_HEADER = ("epoch", "split", "metric", "value")


# data -----------------------------------------------------------------------------

@dataclass
class TaskData:
    vocabs: Vocabs
    splits: Dict[str, List[Sentence]]
    examples: Dict[str, List[LabeledExample]]
    metric: str
    max_len: int = 0


def _read_split(cfg: TrainConfig, path: str) -> List[Sentence]:
    if not path:
        return []
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    if cfg.mode == "transduce":
        return read_pairs(path, cfg.space_split)
    sents = read_column_corpus(path, cfg.token_col, cfg.tag_col)
    if cfg.to_bilou:
        sents = [Sentence(s.source, bilou_encode(iob1_to_bio(s.target))) for s in sents]
    return sents


def read_splits(cfg: TrainConfig) -> Dict[str, List[Sentence]]:
    if cfg.task == "synthetic":
        if cfg.mode == "label":
            task = synth_markov_task(cfg.synth_tags, cfg.synth_words, cfg.synth_max_len, cfg.synth_train,
                                     cfg.synth_dev, cfg.synth_test, cfg.synth_strength, cfg.synth_seed,
                                     cfg.synth_noise)
            return {"train": task.train, "dev": task.dev, "test": task.test}
        train, dev, test = synth_transliteration_task(cfg.synth_train, cfg.synth_dev, cfg.synth_test,
                                                      seed=cfg.synth_seed)
        return {"train": train, "dev": dev, "test": test}
    if cfg.task != "files":
        raise ConfigError("task must be synthetic or files")
    splits = {name: _read_split(cfg, getattr(cfg, name)) for name in ("train", "dev", "test")}
    if not splits["train"]:
        raise DataError("the training split is empty")
    return splits


def transduce_max_len(cfg: TrainConfig, train: Sequence[Sentence]) -> int:
    if cfg.max_len:
        return cfg.max_len
    return max(max(2 * len(s.source), len(s.target)) for s in train)


def load_task(cfg: TrainConfig, vocabs: Optional[Vocabs] = None, max_len: int = 0) -> TaskData:
    """Read or generate the splits; build vocabularies from train unless given."""
    splits = read_splits(cfg)
    if vocabs is None:
        vocabs = Vocabs.build(splits["train"], cfg.mode, cfg.min_word_freq, cfg.lowercase)
    if cfg.mode == "transduce" and not max_len:
        max_len = transduce_max_len(cfg, splits["train"])
    examples = {k: [vocabs.encode(s) for s in v] for k, v in splits.items()}
    metric = resolve_metric(cfg.metric, cfg.mode, vocabs.targets.itos[vocabs.targets.n_reserved:])
    return TaskData(vocabs, splits, examples, metric, max_len)


# metric log ---------------------------------------------------------------------------

class MetricLog:
    """Append-only CSV of ``epoch,split,metric,value`` rows."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.rows: List[Tuple[int, str, str, float]] = []
        if path and not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRIC_HEADER)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        row = (epoch, split, metric, float(value))
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([epoch, split, metric, repr(float(value))])


def read_metric_log(path: str) -> List[Tuple[int, str, str, float]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != METRIC_HEADER:
            raise DataError(f"{path}: not a metric log")
        return [(int(e), s, m, float(v)) for e, s, m, v in reader]


# training loop ---------------------------------------------------------------------------

@dataclass
class FitState:
    """Everything besides parameters needed to continue a run exactly."""

    epoch: int = 0
    best_dev: float = -float("inf")
    best_epoch: int = 0
    since_best: int = 0
    rng: Optional[np.random.Generator] = None


def evaluate(model: SequenceModel, data: TaskData, split: str, beam: int) -> float:
    return score(model, data.splits[split], data.examples[split], data.metric, beam)


def fit(model: SequenceModel, data: TaskData, objective: str, epochs: int, opt: Optimizers,
        state: FitState, log: MetricLog, checkpoint_dir: Optional[str] = None,
        log_start: bool = False, best: Optional[Tuple[dict, dict]] = None) -> FitState:
    """Train for up to ``epochs`` further epochs, keeping the best-dev parameters.

    On return ``model`` holds the best parameters seen. With ``log_start``
    the dev metric of the starting point is logged as epoch 0 of the curve.
    """
    cfg = model.cfg
    train = data.examples["train"]
    if not train:
        raise DataError("no training examples")
    has_dev = bool(data.examples["dev"])
    if best is None:
        best = (copy.deepcopy(model.params), copy.deepcopy(model.critic))
    if log_start and has_dev and state.epoch == 0:
        start = evaluate(model, data, "dev", cfg.eval_beam)
        log.add(0, "dev", data.metric, start)
        state.best_dev = start
    stop = state.epoch + epochs
    while state.epoch < stop:
        state.epoch += 1
        order = state.rng.permutation(len(train))
        losses = []
        for i in range(0, len(train), cfg.batch_size):
            batch = [train[j] for j in order[i:i + cfg.batch_size]]
            losses.append(train_step(model, batch, opt, state.rng, objective, state.epoch - 1)["loss"])
        log.add(state.epoch, "train", "loss", float(np.mean(losses)))
        dev = evaluate(model, data, "dev", cfg.eval_beam) if has_dev else -float(np.mean(losses))
        if has_dev:
            log.add(state.epoch, "dev", data.metric, dev)
        if dev > state.best_dev:
            state.best_dev, state.best_epoch, state.since_best = dev, state.epoch, 0
            best = (copy.deepcopy(model.params), copy.deepcopy(model.critic))
            if checkpoint_dir:
                save_checkpoint(os.path.join(checkpoint_dir, "best.npz"), model, opt, state, data)
        else:
            state.since_best += 1
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, "last.npz"), model, opt, state, data)
        if state.since_best >= cfg.patience:
            break
    model.params, model.critic = best
    return state


# checkpoints ----------------------------------------------------------------------------

def _opt_arrays(prefix: str, st: AdamState) -> Dict[str, np.ndarray]:
    out = {}
    for name, m in st.m.items():
        out[f"{prefix}/m/{name}"] = m
        out[f"{prefix}/v/{name}"] = st.v[name]
    return out


def save_checkpoint(path: str, model: SequenceModel, opt: Optimizers, state: FitState,
                    data: TaskData) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.model_hash(),
        "vocabs": data.vocabs.to_dict(),
        "vocab_digest": data.vocabs.digest(),
        "max_len": model.max_len,
        "metric": data.metric,
        "fit": {"epoch": state.epoch, "best_dev": state.best_dev, "best_epoch": state.best_epoch,
                "since_best": state.since_best,
                "rng": state.rng.bit_generator.state if state.rng is not None else None},
        "opt": {"actor_step": opt.actor.step, "critic_step": opt.critic.step,
                "baseline": opt.baseline, "baseline_count": opt.baseline_count},
    }
    arrays = {f"actor/{k}": v for k, v in model.params.items()}
    arrays.update({f"critic/{k}": v for k, v in model.critic.items()})
    arrays.update(_opt_arrays("opt/actor", opt.actor))
    arrays.update(_opt_arrays("opt/critic", opt.critic))
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: SequenceModel
    opt: Optimizers
    state: FitState
    meta: dict


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"no such checkpoint: {path}")
    try:
        z = np.load(path)
        meta = json.loads(bytes(z["meta"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: not a checkpoint ({exc})") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    cfg = TrainConfig(**meta["config"])
    vocabs = Vocabs.from_dict(meta["vocabs"])
    model = SequenceModel(cfg, vocabs, meta["max_len"], rng=np.random.default_rng(0))
    opt = Optimizers()
    for key in z.files:
        if key == "meta":
            continue
        group, rest = key.split("/", 1)
        arr = np.array(z[key])
        if group == "actor":
            model.params[rest] = arr
        elif group == "critic":
            model.critic[rest] = arr
        else:
            which, kind, name = rest.split("/", 2)
            st = opt.actor if which == "actor" else opt.critic
            getattr(st, kind)[name] = arr
    o = meta["opt"]
    opt.actor.step, opt.critic.step = o["actor_step"], o["critic_step"]
    opt.baseline, opt.baseline_count = o["baseline"], o["baseline_count"]
    f = meta["fit"]
    rng = None
    if f["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = f["rng"]
    state = FitState(f["epoch"], f["best_dev"], f["best_epoch"], f["since_best"], rng)
    return Checkpoint(model, opt, state, meta)


def check_compatible(meta: dict, cfg: Optional[TrainConfig] = None, vocabs: Optional[Vocabs] = None) -> None:
    if cfg is not None and cfg.model_hash() != meta["config_hash"]:
        raise DataError(f"config hash {cfg.model_hash()} does not match the checkpoint's {meta['config_hash']}")
    if vocabs is not None and vocabs.digest() != meta["vocab_digest"]:
        raise DataError("vocabulary digest does not match the checkpoint")


# runs -----------------------------------------------------------------------------------------

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass
class RunResult:
    model: SequenceModel
    state: FitState
    log: MetricLog
    data: TaskData


def train_run(cfg: TrainConfig, out_dir: Optional[str] = None, data: Optional[TaskData] = None) -> RunResult:
    """Maximum-likelihood (or scheduled-sampling) training from scratch."""
    cfg.validate()
    if cfg.objective not in ("ml", "scheduled-sampling"):
        raise ConfigError(f"objective {cfg.objective} needs a maximum-likelihood checkpoint; "
                          "train with objective=ml first and fine-tune from it")
    data = data or load_task(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    model = SequenceModel(cfg, data.vocabs, data.max_len, rng=_rng(cfg.seed, 0))
    log = MetricLog(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    state = fit(model, data, cfg.objective, cfg.epochs, Optimizers(), FitState(rng=_rng(cfg.seed, 1)),
                log, out_dir)
    return RunResult(model, state, log, data)


def resume_run(checkpoint: str, epochs: int, out_dir: Optional[str] = None) -> RunResult:
    """Continue a run from a ``last.npz`` checkpoint for ``epochs`` more epochs."""
    ck = load_checkpoint(checkpoint)
    data = load_task(ck.model.cfg, ck.model.vocabs, ck.model.max_len)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log = MetricLog(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    best = None
    best_path = os.path.join(os.path.dirname(checkpoint), "best.npz")
    if os.path.exists(best_path):
        b = load_checkpoint(best_path).model
        best = (b.params, b.critic)
    state = fit(ck.model, data, ck.model.cfg.objective, epochs, ck.opt, ck.state, log, out_dir, best=best)
    return RunResult(ck.model, state, log, data)


def finetune_run(cfg: TrainConfig, init: SequenceModel, out_dir: Optional[str] = None,
                 data: Optional[TaskData] = None) -> RunResult:
    """Continue from a trained model with a policy-gradient or scheduled-sampling objective."""
    cfg.validate()
    if init.cfg.model_hash() != cfg.model_hash():
        raise ConfigError("fine-tuning config changes the model architecture of the checkpoint")
    if cfg.objective == "ml":
        raise ConfigError("fine-tuning needs an objective other than ml")
    if cfg.head != "rnn":
        raise ConfigError("only the rnn head can be fine-tuned")
    data = data or load_task(cfg, init.vocabs, init.max_len)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    model = SequenceModel(cfg, init.vocabs, init.max_len, rng=_rng(cfg.seed, 0))
    model.params = copy.deepcopy(init.params)
    model.critic = copy.deepcopy(init.critic)
    log = MetricLog(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    state = fit(model, data, cfg.objective, cfg.finetune_epochs, Optimizers(),
                FitState(rng=_rng(cfg.seed, 2)), log, out_dir, log_start=True)
    return RunResult(model, state, log, data)


def final_dev(log: MetricLog) -> float:
    rows = [r for r in log.rows if r[1] == "dev"]
    return rows[-1][3] if rows else float("nan")


# replication ---------------------------------------------------------------------------------

@dataclass
class Replication:
    reports: Dict[Tuple[str, str], EvalReport] = field(default_factory=dict)   # (model, split) -> report
    final_dev: Dict[str, Dict[int, float]] = field(default_factory=dict)       # model -> seed -> value
    curves: Dict[str, Dict[int, List[float]]] = field(default_factory=dict)

    def pvalues(self, split: str = "dev", equal_var: bool = False) -> List[Tuple[str, str, float]]:
        names = [m for m, s in self.reports if s == split]
        out = []
        for a, b in itertools.combinations(names, 2):
            out.append((a, b, t_test(list(self.reports[a, split].values.values()),
                                     list(self.reports[b, split].values.values()), equal_var)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["model", "split", "metric", "seed", "value"])
        for (name, split), rep in self.reports.items():
            for metric, seed, value in rep.rows():
                w.writerow([name, split, metric, seed, repr(value)])
        return buf.getvalue()

    def pvalues_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["split", "model_a", "model_b", "p"])
        for split in sorted({s for _, s in self.reports}):
            for a, b, p in self.pvalues(split):
                w.writerow([split, a, b, repr(p)])
        return buf.getvalue()


def replicate(base: TrainConfig, models: Dict[str, Dict[str, object]], seeds: Sequence[int],
              out_dir: Optional[str] = None, beam: Optional[int] = None) -> Replication:
    """Train every model on every seed (same seed list for all) and score dev and test.

    A model whose objective is not maximum likelihood is fine-tuned from the
    ML model of the same seed and architecture; those ML runs are shared.
    """
    if len(seeds) < 2:
        raise ConfigError("replication needs at least two seeds")
    result = Replication()
    data_cache: Dict[str, TaskData] = {}
    ml_cache: Dict[Tuple[str, int], RunResult] = {}
    for name, overrides in models.items():
        for seed in seeds:
            cfg = base.replace(**overrides).replace(seed=seed).validate()
            run_dir = os.path.join(out_dir, name, f"seed{seed}") if out_dir else None
            ml_cfg = cfg.replace(objective="ml")
            key = json.dumps(ml_cfg.to_dict(), sort_keys=True)
            if key not in data_cache:
                data_cache[key] = load_task(ml_cfg)
            data = data_cache[key]
            if cfg.objective in ("ml", "scheduled-sampling"):
                run = train_run(cfg, run_dir, data)
            else:
                if (key, seed) not in ml_cache:
                    ml_dir = os.path.join(out_dir, "_ml_" + hashlib.sha1(key.encode()).hexdigest()[:8], f"seed{seed}") if out_dir else None
                    ml_cache[key, seed] = train_run(ml_cfg, ml_dir, data)
                run = finetune_run(cfg, ml_cache[key, seed].model, run_dir, data)
            if cfg.objective == "ml":
                ml_cache.setdefault((key, seed), run)
            b = beam or cfg.beam
            for split in ("dev", "test"):
                if data.examples[split]:
                    rep = result.reports.setdefault((name, split), EvalReport(data.metric))
                    rep.values[seed] = evaluate(run.model, data, split, b)
            result.final_dev.setdefault(name, {})[seed] = final_dev(run.log)
            result.curves.setdefault(name, {})[seed] = [r[3] for r in run.log.rows if r[1] == "dev"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w") as f:
            f.write(result.to_csv())
        with open(os.path.join(out_dir, "pvalues.csv"), "w") as f:
            f.write(result.pvalues_csv())
    return result
