"""Run configuration: one flat dataclass, read from ``key = value`` text files."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from typing import Dict, Iterable, Optional

HEADS = ("indp", "rnn", "crf")
MODES = ("label", "transduce")
OBJECTIVES = ("ml", "ac", "ac-standard", "ac+ml", "reinforce", "reinforce-baseline",
              "self-critical", "scheduled-sampling")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # task
    mode: str = "label"
    head: str = "rnn"
    objective: str = "ml"
    metric: str = "auto"            # auto | accuracy | f1 | word_accuracy
    task: str = "synthetic"         # synthetic | files
    train: str = ""
    dev: str = ""
    test: str = ""
    token_col: int = 0
    tag_col: int = -1
    to_bilou: bool = False          # convert BIO tags read from files to BILOU
    space_split: bool = False       # transliteration: characters are space separated
    lowercase: bool = False
    min_word_freq: int = 2
    embeddings: str = ""            # optional pre-trained word vectors

    # synthetic Markov task
    synth_tags: int = 5
    synth_words: int = 50
    synth_max_len: int = 20
    synth_train: int = 1000
    synth_dev: int = 200
    synth_test: int = 200
    synth_strength: float = 0.95
    synth_noise: float = 0.5
    synth_seed: int = 0

    # sizes
    word_dim: int = 100
    char_dim: int = 32
    char_units: int = 32
    use_chars: bool = True
    output_dim: int = 32
    encoder_units: int = 256
    decoder_units: int = 256
    critic_units: int = 0           # 0: same as decoder_units
    critic_slope: float = 0.01
    dropout: float = 0.5
    max_source_len: int = 250
    max_len: int = 0                # transduction decode/pad length; 0: twice the longest training source

    # optimization
    batch_size: int = 32
    max_gradient_norm: float = 5.0
    ml_lr: float = 0.0005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    critic_lr: float = 0.0005
    critic_beta1: float = 0.9
    critic_beta2: float = 0.999
    critic_eps: float = 1e-8
    rl_optimizer: str = "ascent"    # ascent | adam
    rl_step: float = 0.5            # actor-critic step size
    reinforce_step: float = 0.01    # step size for REINFORCE and self-critical objectives
    n_steps: int = 4                # TD steps
    rollout_dropout: bool = True    # apply dropout while decoding policy rollouts
    baseline: str = "critic"        # critic | constant  (reinforce-baseline)
    ss_k: float = 10.0              # inverse-sigmoid schedule parameter
    epochs: int = 50
    finetune_epochs: int = 25
    patience: int = 10
    beam: int = 10
    eval_beam: int = 10             # beam used for the per-epoch dev metric
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.head == "crf" and self.objective != "ml":
            raise ConfigError("the crf head only supports objective=ml")
        if self.head == "indp" and self.objective not in ("ml",):
            raise ConfigError("the indp head only supports objective=ml")
        if self.mode == "transduce" and self.head == "indp":
            raise ConfigError("indp cannot change output length; use rnn or crf for transduction")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        for name in ("ml_lr", "critic_lr", "rl_step", "reinforce_step", "max_gradient_norm", "ss_k"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.rl_optimizer not in ("ascent", "adam"):
            raise ConfigError("rl_optimizer must be ascent or adam")
        if self.baseline not in ("critic", "constant"):
            raise ConfigError("baseline must be critic or constant")
        if self.beam < 1 or self.eval_beam < 1 or self.batch_size < 1:
            raise ConfigError("beam, eval_beam and batch_size must be >= 1")
        return self

    @property
    def critic_hidden(self) -> int:
        return self.critic_units or self.decoder_units

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    def model_hash(self) -> str:
        """Digest of the fields that fix parameter shapes."""
        keys = ("mode", "head", "word_dim", "char_dim", "char_units", "use_chars", "output_dim",
                "encoder_units", "decoder_units", "critic_units", "max_len")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def apply_overrides(cfg: TrainConfig, items: Iterable[tuple]) -> TrainConfig:
    changes = {}
    for key, raw in items:
        key = key.strip().replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            changes[key] = raw if not isinstance(raw, str) else _coerce(_FIELD_TYPES[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return cfg.replace(**changes)


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        items.append((key, value.strip()))
    return apply_overrides(base or TrainConfig(), items)


def load_config(path: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
