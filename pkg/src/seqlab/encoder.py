"""Token features and the sentence-level bi-directional LSTM encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Node, Tape
from .config import TrainConfig
from .data import LabeledExample, Sentence, Vocabs
from .layers import (Params, bidir_final, bidir_run, embed, init_embedding, init_lstm,
                     load_embeddings)

N_CAP_FLAGS = 4


class SequenceTooLong(ValueError):
    pass


@dataclass
class EncoderStates:
    """Encoder output for a right-padded batch.

    ``H[t]`` has shape ``(B, 2 * encoder_units)``; ``mask[b, t]`` is 1 on real
    positions. ``stacked`` is ``H`` as one ``(B, L, D)`` node, built on demand
    for attention.
    """

    H: List[Node]
    mask: np.ndarray
    lengths: np.ndarray
    stacked: Optional[Node] = None

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]


def init_encoder(params: Params, rng: np.random.Generator, cfg: TrainConfig, vocabs: Vocabs) -> None:
    if cfg.mode == "label":
        init_embedding(params, rng, "enc.word_emb", len(vocabs.source), cfg.word_dim)
        if cfg.embeddings:
            load_embeddings(cfg.embeddings, vocabs.source.stoi, params["enc.word_emb"])
        feat = cfg.word_dim + N_CAP_FLAGS
        if cfg.use_chars:
            init_embedding(params, rng, "enc.char_emb", len(vocabs.chars), cfg.char_dim)
            init_lstm(params, rng, "enc.char_fwd", cfg.char_dim, cfg.char_units)
            init_lstm(params, rng, "enc.char_bwd", cfg.char_dim, cfg.char_units)
            feat += 2 * cfg.char_units
    else:
        init_embedding(params, rng, "enc.src_emb", len(vocabs.source), cfg.char_dim)
        feat = cfg.char_dim
    init_lstm(params, rng, "enc.fwd", feat, cfg.encoder_units)
    init_lstm(params, rng, "enc.bwd", feat, cfg.encoder_units)


def dropout_mask(rng: Optional[np.random.Generator], shape, rate: float) -> Optional[np.ndarray]:
    """Inverted-dropout keep mask, or None when ``rng`` is None (inference)."""
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _pad(seqs: Sequence[np.ndarray], fill: int = 0) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _lengths_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    return (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)


def token_features(tape: Tape, params: Params, cfg: TrainConfig, batch: Sequence[LabeledExample],
                   rng: Optional[np.random.Generator]) -> List[Node]:
    """Per-position feature nodes ``(B, F)`` for a batch, time-major list of length L.

    Word embedding and character-RNN finals are concatenated and passed
    through dropout; the capitalization flags are appended afterwards.
    """
    lengths = np.array([ex.length for ex in batch])
    L, B = int(lengths.max()), len(batch)
    words = _pad([ex.words for ex in batch])
    # time-major rows: row t*B + b
    flat_words = words.T.reshape(-1)
    parts = [embed(tape, params, "enc.word_emb", flat_words)]
    if cfg.use_chars:
        char_seqs = []
        for t in range(L):
            for ex in batch:
                char_seqs.append(ex.chars[t] if t < ex.length else np.zeros(1, dtype=np.int64))
        char_lengths = np.array([len(c) for c in char_seqs])
        chars = _pad(char_seqs)
        cmask = _lengths_mask(char_lengths, chars.shape[1])
        inputs = [embed(tape, params, "enc.char_emb", chars[:, k]) for k in range(chars.shape[1])]
        parts.append(bidir_final(tape, params, "enc.char_fwd", "enc.char_bwd", inputs, cmask))
    feat = tape.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    feat = tape.dropout(feat, dropout_mask(rng, feat.value.shape, cfg.dropout))
    caps = np.zeros((L, B, N_CAP_FLAGS))
    for b, ex in enumerate(batch):
        caps[:ex.length, b] = ex.caps
    feat = tape.concat([feat, tape.constant(caps.reshape(L * B, N_CAP_FLAGS))], axis=-1)
    return [tape.slice(feat, t * B, (t + 1) * B, axis=0) for t in range(L)]


def char_features(tape: Tape, params: Params, cfg: TrainConfig, sources: np.ndarray,
                  rng: Optional[np.random.Generator]) -> List[Node]:
    B, L = sources.shape
    feat = embed(tape, params, "enc.src_emb", sources.T.reshape(-1))
    feat = tape.dropout(feat, dropout_mask(rng, feat.value.shape, cfg.dropout))
    return [tape.slice(feat, t * B, (t + 1) * B, axis=0) for t in range(L)]


def encode(tape: Tape, params: Params, cfg: TrainConfig, batch: Sequence[LabeledExample],
           rng: Optional[np.random.Generator] = None, pad_to: int = 0) -> EncoderStates:
    """Run the encoder over a batch of examples.

    ``pad_to`` forces every source to that many positions (the CRF
    transduction setup), treating padding symbols as real input.
    """
    lengths = np.array([ex.length for ex in batch])
    if lengths.min() < 1:
        raise ValueError("cannot encode an empty sequence")
    limit = pad_to or cfg.max_source_len
    if lengths.max() > limit:
        raise SequenceTooLong(f"source of length {lengths.max()} exceeds the maximum of {limit}")
    if cfg.mode == "label":
        inputs = token_features(tape, params, cfg, batch, rng)
    else:
        sources = _pad([ex.words for ex in batch])
        if pad_to:
            sources = np.pad(sources, ((0, 0), (0, pad_to - sources.shape[1])))
            lengths = np.full(len(batch), pad_to)
        inputs = char_features(tape, params, cfg, sources, rng)
    mask = _lengths_mask(lengths, len(inputs))
    H = bidir_run(tape, params, "enc.fwd", "enc.bwd", inputs, mask)
    return EncoderStates(H, mask, lengths)


def word_features(tape: Tape, params: Params, cfg: TrainConfig, vocabs: Vocabs, token: str,
                  rng: Optional[np.random.Generator] = None) -> Node:
    """Feature vector of a single surface token, shape ``(1, F)``."""
    ex = vocabs.encode(Sentence([token], []), with_target=False)
    return token_features(tape, params, cfg, [ex], rng)[0]
