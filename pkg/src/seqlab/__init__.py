"""Sequence labeling and transduction with INDP, decoder-RNN and CRF heads, trained by
maximum likelihood and fine-tuned with an adjusted actor-critic objective."""

from .config import ConfigError, TrainConfig
from .data import DataError, Sentence, Vocabs
from .model import SequenceModel

__all__ = ["ConfigError", "DataError", "Sentence", "SequenceModel", "TrainConfig", "Vocabs"]
