"""Beam search and the task metrics: entity F1, tag accuracy, word accuracy, t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from . import decoders as dec
from .autodiff import Tape
from .data import EOS, PAD, DataError, LabeledExample, Sentence, split_tag


# beam search ---------------------------------------------------------------------

def beam_search(model, example: LabeledExample, width: int, max_steps: Optional[int] = None) -> List[int]:
    """Best output sequence of the decoder RNN under a beam of ``width``.

    Hypotheses are ranked by raw summed log-probability, ties broken by
    earlier beam rank and then lower token id. Labeling runs exactly ``l``
    steps; transduction finishes a hypothesis when it emits EOS.
    """
    ids, _ = beam_search_scored(model, example, width, max_steps)
    return ids


def beam_search_scored(model, example: LabeledExample, width: int,
                       max_steps: Optional[int] = None) -> Tuple[List[int], float]:
    if width < 1:
        raise ValueError("beam width must be >= 1")
    tape = Tape(grad=False)
    params = model.params
    enc = model.encode(tape, [example])
    ctx = model.contexts(tape, enc).select(np.zeros(1, dtype=np.int64))
    state = dec.decoder_initial(tape, params, ctx)
    prev = np.array([dec.start_symbol(params)])
    if model.transduce:
        eos = model.vocabs.targets.id(EOS)
        steps = max_steps or model.max_len + 1
    else:
        eos = -1
        steps = example.length

    live_tokens: List[Tuple[int, ...]] = [()]
    live_scores = np.zeros(1)
    finished: List[Tuple[float, Tuple[int, ...]]] = []
    for t in range(steps):
        state, _, logp = dec.rnn_decoder_step(tape, params, state, prev, ctx, t)
        cand = live_scores[:, None] + logp.value            # (k, V)
        k, V = cand.shape
        flat = cand.reshape(-1)
        parent = np.repeat(np.arange(k), V)
        token = np.tile(np.arange(V), k)
        order = np.lexsort((token, parent, -flat))
        # finished hypotheses compete for the same slots
        pool = [(float(flat[i]), 0, int(i)) for i in order[:width]]
        pool += [(s, 1, j) for j, (s, _) in enumerate(finished)]
        pool.sort(key=lambda x: (-x[0], x[1]))
        pool = pool[:width]
        new_finished = [finished[j] for s, kind, j in pool if kind == 1]
        keep = [i for s, kind, i in pool if kind == 0]
        next_tokens, next_scores, parents, fed = [], [], [], []
        for i in keep:
            seq = live_tokens[parent[i]] + (int(token[i]),)
            if int(token[i]) == eos:
                new_finished.append((float(flat[i]), seq))
            else:
                next_tokens.append(seq)
                next_scores.append(float(flat[i]))
                parents.append(int(parent[i]))
                fed.append(int(token[i]))
        finished = new_finished
        if not next_tokens:
            break
        rows = np.array(parents, dtype=np.int64)
        state = dec.DecoderState(tape.embedding(state.h, rows), tape.embedding(state.c, rows),
                                 tape.embedding(state.context, rows))
        ctx = ctx.select(rows)
        live_tokens, live_scores, prev = next_tokens, np.array(next_scores), np.array(fed)
    else:
        # out of steps: unfinished hypotheses count as complete
        finished += list(zip(live_scores.tolist(), live_tokens))
    best_score, best = min(finished, key=lambda x: (-x[0], x[1]))
    return model._strip(list(best)), best_score


# metrics ---------------------------------------------------------------------------

def _chunk_start(prev: str, tag: str) -> bool:
    p1, t1 = split_tag(prev)
    p2, t2 = split_tag(tag)
    if p2 == "O":
        return False
    if p1 == "O":
        return True
    if t1 != t2:
        return True
    return p2 in ("B", "S", "U") or p1 in ("E", "S", "L", "U")


def _chunk_end(prev: str, tag: str) -> bool:
    p1, t1 = split_tag(prev)
    p2, t2 = split_tag(tag)
    if p1 == "O":
        return False
    if p2 == "O":
        return True
    if t1 != t2:
        return True
    return p2 in ("B", "S", "U") or p1 in ("E", "S", "L", "U")


def extract_entities(tags: Sequence[str]) -> List[Tuple[str, int, int]]:
    """Typed inclusive spans under the conlleval chunking rules.

    BILOU's L and U play the roles of IOBES's E and S; an ill-formed
    continuation (for example I- after O, or a type switch) opens a new span.
    """
    spans = []
    start = None
    prev = "O"
    for i, tag in enumerate(list(tags) + ["O"]):
        if start is not None and _chunk_end(prev, tag):
            spans.append((split_tag(prev)[1], start, i - 1))
            start = None
        if _chunk_start(prev, tag):
            start = i
        prev = tag
    return spans


Tags = Union[Sequence[str], Sequence[Sequence[str]]]


def _as_corpus(tags: Tags) -> List[Sequence[str]]:
    if len(tags) and isinstance(tags[0], str):
        return [tags]
    return list(tags)


def entity_f1(gold: Tags, predicted: Tags) -> Tuple[float, float, float]:
    """Corpus-level entity precision, recall and F1 (fractions, 0 when undefined)."""
    gold, predicted = _as_corpus(gold), _as_corpus(predicted)
    if len(gold) != len(predicted):
        raise ValueError("gold and predicted corpora differ in sentence count")
    tp = n_gold = n_pred = 0
    for g, p in zip(gold, predicted):
        if len(g) != len(p):
            raise ValueError("gold and predicted sentences differ in length")
        gs, ps = set(extract_entities(g)), set(extract_entities(p))
        tp += len(gs & ps)
        n_gold += len(gs)
        n_pred += len(ps)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def tag_accuracy(gold: Sequence, predicted: Sequence) -> float:
    gold, predicted = _flatten(gold), _flatten(predicted)
    if len(gold) != len(predicted):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(predicted)} predicted")
    if not gold:
        return 0.0
    return sum(g == p for g, p in zip(gold, predicted)) / len(gold)


def _flatten(seqs: Sequence) -> list:
    if len(seqs) and isinstance(seqs[0], (list, tuple, np.ndarray)):
        out = []
        for s in seqs:
            if isinstance(s, np.ndarray):
                s = s.tolist()
            out.extend(s)
        return out
    return list(seqs)


STRIP_SYMBOLS = (PAD, EOS, "PAD", "EOS")


def strip_word(word: Union[str, Sequence[str]]) -> str:
    """Join symbols up to the first padding/EOS symbol into a surface string."""
    symbols = word.split() if isinstance(word, str) else list(word)
    return "".join(dec.strip_padding(symbols, STRIP_SYMBOLS))


def word_accuracy(gold: Sequence, predicted: Sequence) -> float:
    if len(gold) != len(predicted):
        raise ValueError("gold and predicted lists differ in length")
    if not gold:
        return 0.0
    return sum(strip_word(g) == strip_word(p) for g, p in zip(gold, predicted)) / len(gold)


def t_test(a: Sequence[float], b: Sequence[float], equal_var: bool = False) -> float:
    """Two-sided two-sample t-test p-value (Welch by default, pooled with ``equal_var``).

    When both samples have zero variance the p-value is 1 for equal means
    and 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise ValueError("each sample needs at least two values")
    m1, m2 = a.mean(), b.mean()
    v1, v2 = a.var(ddof=1), b.var(ddof=1)
    if equal_var:
        df = n1 + n2 - 2
        pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / df
        se2 = pooled * (1.0 / n1 + 1.0 / n2)
    else:
        se2 = v1 / n1 + v2 / n2
        df = se2 ** 2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1)) if se2 > 0 else 1.0
    if se2 <= 0:
        return 1.0 if m1 == m2 else 0.0
    t = (m1 - m2) / math.sqrt(se2)
    p = 2.0 * special.stdtr(df, -abs(t))
    return float(min(max(p, 0.0), 1.0))


# reports ----------------------------------------------------------------------------

@dataclass
class EvalReport:
    metric: str
    values: Dict[int, float] = field(default_factory=dict)   # seed -> score

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.values.values())))

    @property
    def std(self) -> float:
        v = list(self.values.values())
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def rows(self) -> List[Tuple[str, int, float]]:
        return [(self.metric, seed, value) for seed, value in self.values.items()]


def resolve_metric(metric: str, mode: str, tags: Sequence[str]) -> str:
    if metric != "auto":
        return metric
    if mode == "transduce":
        return "word_accuracy"
    try:
        prefixes = {split_tag(t)[0] for t in tags}
    except DataError:
        return "accuracy"
    return "f1" if prefixes - {"O"} else "accuracy"


def score(model, sentences: Sequence[Sentence], examples: Sequence[LabeledExample], metric: str,
          beam: int = 1, batch_size: int = 64) -> float:
    """Decode ``examples`` and compare with the gold targets of ``sentences``."""
    if not examples:
        return 0.0
    preds: List[List[int]] = []
    for i in range(0, len(examples), batch_size):
        preds.extend(model.predict(examples[i:i + batch_size], beam))
    vocab = model.vocabs.targets
    hyp = [vocab.tokens(p) for p in preds]
    gold = [list(s.target) for s in sentences]
    if metric == "f1":
        return entity_f1(gold, hyp)[2]
    if metric == "accuracy":
        return tag_accuracy(gold, hyp)
    if metric == "word_accuracy":
        return word_accuracy([" ".join(g) for g in gold], [" ".join(h) for h in hyp])
    raise ValueError(f"unknown metric {metric!r}")
