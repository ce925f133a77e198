"""Encoder plus one output head, with the parameter sets of actor and critic."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import decoders as dec
from .autodiff import Node, Tape
from .config import TrainConfig
from .data import EOS, PAD, LabeledExample, Vocabs
from .encoder import EncoderStates, _pad, encode, init_encoder
from .layers import Params, init_critic


@dataclass
class Trace:
    """What one decoder unroll produced, step by step (time-major lists).

    ``fed[t]`` is the token fed into step ``t + 1``; ``scored[t]`` is the token
    whose log-probability ``logp_scored[t]`` the objective uses.
    """

    logp: List[Node] = field(default_factory=list)          # (B, V) log-distributions
    scored: List[np.ndarray] = field(default_factory=list)  # (B,)
    fed: List[np.ndarray] = field(default_factory=list)     # (B,)
    logp_scored: List[Node] = field(default_factory=list)   # (B,)
    states: List[Node] = field(default_factory=list)        # d_t, (B, units)
    contexts: List[Node] = field(default_factory=list)      # c_t, (B, ctx)
    mask: List[np.ndarray] = field(default_factory=list)    # (B,) 1 while the episode runs

    def predictions(self) -> np.ndarray:
        return np.stack(self.scored, axis=1)

    def step_mask(self) -> np.ndarray:
        return np.stack(self.mask, axis=1)


# policy(t, logp_values (B, V), gold_t or None) -> (scored tokens, fed tokens)
Policy = Callable[[int, np.ndarray, Optional[np.ndarray]], Tuple[np.ndarray, np.ndarray]]


def teacher_policy(t, logp, gold):
    return gold, gold


def greedy_policy(t, logp, gold):
    choice = np.argmax(logp, axis=1)
    return choice, choice


def sampling_policy(rng: np.random.Generator) -> Policy:
    def policy(t, logp, gold):
        p = np.exp(logp)
        cum = np.cumsum(p, axis=1)
        u = rng.random((p.shape[0], 1)) * cum[:, -1:]
        choice = np.minimum((cum < u).sum(axis=1), p.shape[1] - 1)
        return choice, choice
    return policy


def scheduled_policy(rng: np.random.Generator, epsilon: float) -> Policy:
    """Score gold; feed gold with probability ``epsilon``, else the model's argmax."""
    def policy(t, logp, gold):
        use_gold = rng.random(gold.shape[0]) < epsilon
        return gold, np.where(use_gold, gold, np.argmax(logp, axis=1))
    return policy


class SequenceModel:
    """Parameters and forward computations of one labeler or transducer.

    ``params`` holds the actor; ``critic`` the value network used by the
    actor-critic objectives (present for the rnn head only).
    """

    def __init__(self, cfg: TrainConfig, vocabs: Vocabs, max_len: int = 0,
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.vocabs = vocabs
        self.max_len = max_len
        self.params: Params = {}
        self.critic: Params = {}
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        init_encoder(self.params, rng, cfg, vocabs)
        ctx = 2 * cfg.encoder_units
        n_out = vocabs.n_targets
        if cfg.head == "indp":
            dec.init_indp(self.params, rng, ctx, n_out)
        elif cfg.head == "crf":
            dec.init_crf(self.params, rng, ctx, n_out)
        else:
            dec.init_rnn_decoder(self.params, rng, ctx, n_out, cfg.output_dim, cfg.decoder_units,
                                 attention=cfg.mode == "transduce")
            init_critic(self.critic, rng, cfg.decoder_units + ctx, cfg.critic_hidden)

    @property
    def transduce(self) -> bool:
        return self.cfg.mode == "transduce"

    @property
    def n_out(self) -> int:
        return self.vocabs.n_targets

    # targets -------------------------------------------------------------------

    def gold_matrix(self, batch: Sequence[LabeledExample]) -> Tuple[np.ndarray, np.ndarray]:
        """Padded gold ids and their mask in the form the head is trained on."""
        if not self.transduce:
            tags = _pad([ex.tags for ex in batch])
        elif self.cfg.head == "crf":
            pad = self.vocabs.targets.id(PAD)
            if max(len(ex.tags) for ex in batch) > self.max_len:
                raise ValueError(f"target longer than max_len={self.max_len}")
            tags = np.full((len(batch), self.max_len), pad, dtype=np.int64)
            for i, ex in enumerate(batch):
                tags[i, :len(ex.tags)] = ex.tags
            return tags, np.ones_like(tags, dtype=np.float64)
        else:
            eos = self.vocabs.targets.id(EOS)
            tags = _pad([np.append(ex.tags, eos) for ex in batch])
        lengths = np.array([len(ex.tags) + (1 if self.transduce else 0) for ex in batch])
        mask = (np.arange(tags.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
        return tags, mask

    # forward ---------------------------------------------------------------------

    def encode(self, tape: Tape, batch: Sequence[LabeledExample],
               rng: Optional[np.random.Generator] = None) -> EncoderStates:
        pad_to = self.max_len if (self.transduce and self.cfg.head == "crf") else 0
        return encode(tape, self.params, self.cfg, batch, rng, pad_to=pad_to)

    def contexts(self, tape: Tape, enc: EncoderStates) -> dec.Contexts:
        return dec.Contexts(tape, self.params, enc, attention=self.transduce)

    def log_likelihood(self, tape: Tape, batch: Sequence[LabeledExample],
                       rng: Optional[np.random.Generator] = None) -> Node:
        """Per-example ``log p(Y|X)``, shape ``(B,)``; the rnn head is teacher forced."""
        enc = self.encode(tape, batch, rng)
        gold, mask = self.gold_matrix(batch)
        if self.cfg.head == "indp":
            return dec.indp_log_prob(tape, self.params, enc, gold)
        if self.cfg.head == "crf":
            em = dec.crf_emissions(tape, self.params, enc.H)
            return dec.crf_batch_log_likelihood(tape, self.params, em, gold, mask)
        trace = self.unroll(tape, enc, teacher_policy, gold, mask)
        return self.sequence_logp(tape, trace)

    def sequence_logp(self, tape: Tape, trace: Trace) -> Node:
        total = None
        for lp, m in zip(trace.logp_scored, trace.mask):
            term = lp * m
            total = term if total is None else total + term
        return total

    def unroll(self, tape: Tape, enc: EncoderStates, policy: Policy,
               gold: Optional[np.ndarray] = None, gold_mask: Optional[np.ndarray] = None,
               max_steps: Optional[int] = None) -> Trace:
        """Run the decoder RNN with tokens chosen by ``policy``.

        In labeling mode the unroll lasts exactly as long as each source. In
        transduction mode a row stops after it scores EOS, or when its gold
        sequence ends if ``gold_mask`` is given.
        """
        contexts = self.contexts(tape, enc)
        state = dec.decoder_initial(tape, self.params, contexts)
        B = enc.batch_size
        prev = np.full(B, dec.start_symbol(self.params), dtype=np.int64)
        eos = self.vocabs.targets.id(EOS) if self.transduce else -1
        if not self.transduce:
            steps = enc.mask.shape[1]
        elif gold_mask is not None:
            steps = gold_mask.shape[1]
        else:
            steps = max_steps or self.max_len + 1
        alive = np.ones(B)
        trace = Trace()
        for t in range(steps):
            if not self.transduce:
                m = enc.mask[:, t]
            elif gold_mask is not None:
                m = gold_mask[:, t]
            else:
                m = alive.copy()
            if not m.any():
                break
            state, c_t, logp = dec.rnn_decoder_step(tape, self.params, state, prev, contexts, t,
                                                    m[:, None] if not np.all(m) else None)
            gold_t = None if gold is None else gold[:, t]
            scored, fed = policy(t, logp.value, gold_t)
            trace.logp.append(logp)
            trace.scored.append(np.asarray(scored))
            trace.fed.append(np.asarray(fed))
            trace.logp_scored.append(tape.pick(logp, scored))
            trace.states.append(state.h)
            trace.contexts.append(c_t)
            trace.mask.append(m)
            prev = np.asarray(fed)
            if self.transduce and gold_mask is None:
                alive = alive * (np.asarray(scored) != eos)
        return trace

    # decoding ------------------------------------------------------------------------

    def predict(self, batch: Sequence[LabeledExample], beam: int = 1) -> List[List[int]]:
        """Output id sequences with padding / EOS stripped."""
        from .evaluation import beam_search
        if self.cfg.head == "rnn" and beam > 1:
            return [beam_search(self, ex, beam) for ex in batch]
        tape = Tape(grad=False)
        enc = self.encode(tape, batch)
        out: List[List[int]] = []
        if self.cfg.head == "indp":
            lps = dec.indp_log_probs(tape, self.params, enc.H)
            pred = np.stack([np.argmax(lp.value, axis=1) for lp in lps], axis=1)
            return [list(map(int, pred[i, :ex.length])) for i, ex in enumerate(batch)]
        if self.cfg.head == "crf":
            em = np.stack([e.value for e in dec.crf_emissions(tape, self.params, enc.H)], axis=1)
            for i in range(len(batch)):
                n = int(enc.lengths[i])
                path = dec.crf_viterbi(dec.crf_potentials(self.params, em[i, :n]))
                out.append(self._strip(path))
            return out
        trace = self.unroll(tape, enc, greedy_policy)
        pred, mask = trace.predictions(), trace.step_mask()
        for i in range(len(batch)):
            out.append(self._strip([int(p) for p, m in zip(pred[i], mask[i]) if m > 0]))
        return out

    def _strip(self, ids: Sequence[int]) -> List[int]:
        if not self.transduce:
            return list(ids)
        stops = {self.vocabs.targets.id(EOS), self.vocabs.targets.id(PAD)}
        out = dec.strip_padding(ids, stops)
        # the final decoder step is only there to emit EOS
        return out[:self.max_len] if self.max_len else out
