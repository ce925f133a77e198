"""Output heads: independent softmax, decoder RNN (with optional attention), linear-chain CRF."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Node, ShapeError, Tape
from .encoder import EncoderStates
from .layers import Params, embed, init_embedding, init_linear, init_lstm, linear, lstm_step

NEG_INF = -1e30


# independent softmax ---------------------------------------------------------------

def init_indp(params: Params, rng: np.random.Generator, ctx_dim: int, n_out: int) -> None:
    init_linear(params, rng, "indp", ctx_dim, n_out)


def indp_log_probs(tape: Tape, params: Params, H: Sequence[Node]) -> List[Node]:
    return [tape.log_softmax(linear(tape, params, "indp", h)) for h in H]


def indp_log_prob(tape: Tape, params: Params, enc: EncoderStates, tags: np.ndarray) -> Node:
    """Per-example ``sum_t log softmax(W h_t + b)[y_t]``, shape ``(B,)``."""
    if tags.shape != enc.mask.shape:
        raise ShapeError(f"indp: tags shape {tags.shape} != positions {enc.mask.shape}")
    total = None
    for t, lp in enumerate(indp_log_probs(tape, params, enc.H)):
        term = tape.pick(lp, tags[:, t]) * enc.mask[:, t]
        total = term if total is None else total + term
    return total


# decoder RNN -------------------------------------------------------------------------

def init_rnn_decoder(params: Params, rng: np.random.Generator, ctx_dim: int, n_out: int,
                     output_dim: int, units: int, attention: bool) -> None:
    # the extra embedding row is the start symbol fed at t = 1
    init_embedding(params, rng, "dec.out_emb", n_out + 1, output_dim)
    init_lstm(params, rng, "dec.rnn", output_dim + ctx_dim, units)
    init_linear(params, rng, "dec.out", ctx_dim + units, n_out)
    if attention:
        params["dec.att"] = rng.uniform(-0.1, 0.1, size=(units, ctx_dim))


@dataclass
class DecoderState:
    h: Node
    c: Node
    context: Node   # c_{t-1}, fed back into the recurrence


class Contexts:
    """Supplies ``c_t`` to the decoder for a set of rows of an encoded batch.

    Labeling mode reads ``h_t`` directly; transduction mode attends over all
    source positions. ``rows`` maps decoder rows (e.g. beam hypotheses) to
    batch members.
    """

    def __init__(self, tape: Tape, params: Params, enc: EncoderStates, attention: bool,
                 rows: Optional[np.ndarray] = None):
        self.tape = tape
        self.params = params
        self.enc = enc
        self.attention = attention
        self.rows = rows
        self._H = {}
        self._stacked = None

    @property
    def size(self) -> int:
        return self.enc.batch_size if self.rows is None else len(self.rows)

    @property
    def dim(self) -> int:
        return self.enc.H[0].value.shape[1]

    def select(self, rows: np.ndarray) -> "Contexts":
        base = rows if self.rows is None else self.rows[rows]
        out = Contexts(self.tape, self.params, self.enc, self.attention, base)
        return out

    def h_at(self, t: int) -> Node:
        node = self._H.get(t)
        if node is None:
            node = self.enc.H[t]
            if self.rows is not None:
                node = self.tape.embedding(node, self.rows)
            self._H[t] = node
        return node

    def stacked(self) -> Tuple[Node, np.ndarray]:
        if self.enc.stacked is None:
            self.enc.stacked = self.tape.stack(self.enc.H, axis=1)
        if self._stacked is None:
            if self.rows is None:
                self._stacked = (self.enc.stacked, self.enc.mask)
            else:
                self._stacked = (self.tape.embedding(self.enc.stacked, self.rows), self.enc.mask[self.rows])
        return self._stacked

    def at(self, t: int, d_t: Node) -> Node:
        if not self.attention:
            return self.h_at(t)
        Hs, mask = self.stacked()
        return attention_context(self.tape, self.params, d_t, Hs, mask)[0]


def attention_context(tape: Tape, params: Params, d_t: Node, Hs: Node,
                      mask: Optional[np.ndarray] = None) -> Tuple[Node, Node]:
    """Global-general attention: score ``d^T W_a h``, softmax over sources, weighted sum.

    ``Hs`` is ``(B, L, D)``; returns ``c_t`` of shape ``(B, D)`` and weights ``(B, L)``.
    """
    B, L, D = Hs.value.shape
    q = tape.matmul(d_t, tape.param("dec.att", params["dec.att"]))
    scores = tape.sum(Hs * tape.reshape(q, (B, 1, D)), axis=2)
    if mask is not None and not np.all(mask):
        scores = scores + np.where(mask > 0, 0.0, NEG_INF)
    alpha = tape.softmax(scores, axis=1)
    c_t = tape.sum(Hs * tape.reshape(alpha, (B, L, 1)), axis=1)
    return c_t, alpha


def decoder_initial(tape: Tape, params: Params, contexts: Contexts) -> DecoderState:
    n = params["dec.rnn.w_h"].shape[1]
    k = contexts.size
    zero = np.zeros((k, n))
    return DecoderState(tape.constant(zero), tape.constant(zero), tape.constant(np.zeros((k, contexts.dim))))


def start_symbol(params: Params) -> int:
    return params["dec.out_emb"].shape[0] - 1


def rnn_decoder_step(tape: Tape, params: Params, state: DecoderState, prev_tokens: np.ndarray,
                     contexts: Contexts, t: int,
                     mask: Optional[np.ndarray] = None) -> Tuple[DecoderState, Node, Node]:
    """``d_t = LSTM(d_{t-1}, [emb(y_{t-1}); c_{t-1}])``; returns (state, c_t, log p_SM(.|c_t, d_t))."""
    x = tape.concat([embed(tape, params, "dec.out_emb", prev_tokens), state.context], axis=-1)
    h, c = lstm_step(tape, params, "dec.rnn", x, (state.h, state.c), mask)
    c_t = contexts.at(t, h)
    logp = tape.log_softmax(linear(tape, params, "dec.out", tape.concat([c_t, h], axis=-1)))
    return DecoderState(h, c, c_t), c_t, logp


# linear-chain CRF ------------------------------------------------------------------------

@dataclass
class CrfPotentials:
    """Scores of a single sequence: ``emissions`` (l, T), ``transitions[from, to]`` (T, T),
    and boundary scores ``start``/``stop`` (T,)."""

    emissions: np.ndarray
    transitions: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    @classmethod
    def zeros(cls, length: int, n_tags: int) -> "CrfPotentials":
        return cls(np.zeros((length, n_tags)), np.zeros((n_tags, n_tags)), np.zeros(n_tags), np.zeros(n_tags))

    @property
    def n_tags(self) -> int:
        return self.transitions.shape[0]


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def crf_log_z(pot: CrfPotentials) -> float:
    """Log partition function by the forward recursion in log space."""
    alpha = pot.start + pot.emissions[0]
    for t in range(1, len(pot.emissions)):
        alpha = _lse(alpha[:, None] + pot.transitions, axis=0) + pot.emissions[t]
    return float(_lse(alpha + pot.stop, axis=0))


def crf_path_score(pot: CrfPotentials, tags: Sequence[int]) -> float:
    tags = np.asarray(tags, dtype=np.int64)
    if len(tags) != len(pot.emissions):
        raise ShapeError(f"crf: {len(tags)} tags for {len(pot.emissions)} positions")
    if tags.size and (tags.min() < 0 or tags.max() >= pot.n_tags):
        raise ValueError(f"crf: tag id out of range [0, {pot.n_tags})")
    score = pot.start[tags[0]] + pot.emissions[np.arange(len(tags)), tags].sum()
    score += pot.transitions[tags[:-1], tags[1:]].sum() + pot.stop[tags[-1]]
    return float(score)


def crf_log_likelihood(pot: CrfPotentials, tags: Sequence[int]) -> float:
    return crf_path_score(pot, tags) - crf_log_z(pot)


def crf_viterbi(pot: CrfPotentials) -> List[int]:
    """Highest-scoring tag path; ties go to the lowest tag index."""
    score = pot.start + pot.emissions[0]
    back = []
    for t in range(1, len(pot.emissions)):
        cand = score[:, None] + pot.transitions      # (from, to)
        best_from = np.argmax(cand, axis=0)
        back.append(best_from)
        score = cand[best_from, np.arange(pot.n_tags)] + pot.emissions[t]
    last = int(np.argmax(score + pot.stop))
    path = [last]
    for bp in reversed(back):
        path.append(int(bp[path[-1]]))
    return path[::-1]


def init_crf(params: Params, rng: np.random.Generator, ctx_dim: int, n_out: int) -> None:
    init_linear(params, rng, "crf.emit", ctx_dim, n_out)
    params["crf.trans"] = np.zeros((n_out, n_out))
    params["crf.start"] = np.zeros(n_out)
    params["crf.stop"] = np.zeros(n_out)


def crf_emissions(tape: Tape, params: Params, H: Sequence[Node]) -> List[Node]:
    return [linear(tape, params, "crf.emit", h) for h in H]


def crf_potentials(params: Params, emissions: np.ndarray) -> CrfPotentials:
    return CrfPotentials(emissions, params["crf.trans"], params["crf.start"], params["crf.stop"])


def crf_batch_log_likelihood(tape: Tape, params: Params, emissions: Sequence[Node],
                             tags: np.ndarray, mask: np.ndarray) -> Node:
    """Per-example CRF log-likelihood of gold ``tags`` (B, L) over right-padded emissions."""
    B, L = tags.shape
    T = params["crf.trans"].shape[0]
    trans = tape.param("crf.trans", params["crf.trans"])
    start = tape.param("crf.start", params["crf.start"])
    stop = tape.param("crf.stop", params["crf.stop"])
    lengths = mask.sum(axis=1).astype(np.int64)
    eye = np.eye(T)

    # log Z
    alpha = start + emissions[0]
    trans3 = tape.reshape(trans, (1, T, T))
    for t in range(1, L):
        step = tape.logsumexp(tape.reshape(alpha, (B, T, 1)) + trans3, axis=1) + emissions[t]
        m = mask[:, t:t + 1]
        alpha = step if np.all(m) else alpha + tape.constant(m) * (step - alpha)
    log_z = tape.logsumexp(alpha + stop, axis=1)

    # gold path score
    score = tape.sum(start * eye[tags[:, 0]], axis=1)
    for t in range(L):
        term = tape.pick(emissions[t], tags[:, t])
        if t > 0:
            term = term + tape.pick(tape.embedding(trans, tags[:, t - 1]), tags[:, t])
        score = score + term * mask[:, t]
    last = tags[np.arange(B), lengths - 1]
    score = score + tape.sum(stop * eye[last], axis=1)
    return score - log_z


def crf_pad_transduce(source: Sequence[str], target: Sequence[str], max_len: int,
                      pad: str) -> Tuple[List[str], List[str]]:
    """Extend both sequences with padding symbols to ``max_len``."""
    if len(source) > max_len or len(target) > max_len:
        raise ValueError(f"sequence longer than max_len={max_len}: {len(source)}, {len(target)}")
    return (list(source) + [pad] * (max_len - len(source)),
            list(target) + [pad] * (max_len - len(target)))


def strip_padding(seq: Sequence, stop_symbols) -> list:
    """Prefix of ``seq`` before the first symbol in ``stop_symbols``."""
    out = []
    for s in seq:
        if s in stop_symbols:
            break
        out.append(s)
    return out
