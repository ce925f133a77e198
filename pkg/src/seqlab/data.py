"""Corpora, vocabularies, preprocessing, tag-scheme conversion and synthetic tasks."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

PAD, UNK, NUM, EOS, GO = "<pad>", "<unk>", "NUM", "<eos>", "<go>"
WORD_RESERVED = (PAD, UNK, NUM, EOS, GO)
CHAR_RESERVED = (PAD, UNK)
TARGET_RESERVED = (PAD, EOS, UNK)

NUMBER_RE = re.compile(r"^[0-9]+(?:[.,\-][0-9]+)*$")


class DataError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Token <-> id map; reserved tokens occupy the first ids in the given order."""

    itos: List[str]
    n_reserved: int = 0
    stoi: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, tokens: Iterable[str], reserved: Sequence[str] = (), min_freq: int = 1) -> "Vocabulary":
        counts = Counter(tokens)
        kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in reserved),
                      key=lambda t: (-counts[t], t))
        return cls(list(reserved) + kept, len(reserved))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            if UNK in self.stoi:
                return self.stoi[UNK]
            raise DataError(f"token {token!r} not in vocabulary")
        return idx

    def ids(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def tokens(self, ids: Iterable[int]) -> List[str]:
        return [self.itos[int(i)] for i in ids]

    def digest(self) -> str:
        return hashlib.sha1("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]


# preprocessing -----------------------------------------------------------------

def is_number(token: str) -> bool:
    return NUMBER_RE.match(token) is not None


def normalize(token: str, lowercase: bool = False) -> str:
    """Number replacement (and optional case folding), independent of any vocabulary."""
    if token in WORD_RESERVED:
        return token
    if is_number(token):
        return NUM
    return token.lower() if lowercase else token


def preprocess(token: str, vocab: Vocabulary, lowercase: bool = False) -> str:
    """Map numbers to NUM and out-of-vocabulary tokens to UNK."""
    tok = normalize(token, lowercase)
    return tok if tok in vocab else UNK


def cap_flags(token: str) -> np.ndarray:
    """[all-uppercase, initial-uppercase, contains-digit, all-lowercase]."""
    all_upper = token.isupper()
    return np.array([
        all_upper,
        token[:1].isupper() and not all_upper,
        any(ch.isdigit() for ch in token),
        token.islower(),
    ], dtype=np.float64)


# examples ------------------------------------------------------------------------

@dataclass
class Sentence:
    """Raw source/target pair: tokens and tags, or source and target characters."""

    source: List[str]
    target: List[str]


@dataclass
class LabeledExample:
    words: np.ndarray            # (l,) source ids: words, or characters in transduction mode
    tags: np.ndarray             # (m,) target ids
    chars: List[np.ndarray]      # per-token character ids (labeling mode only)
    caps: np.ndarray             # (l, 4) capitalization flags of the surface forms
    surface: List[str]

    @property
    def length(self) -> int:
        return len(self.words)


# column corpora ------------------------------------------------------------------

def read_column_corpus(path: str, token_col: int = 0, tag_col: int = -1) -> List[Sentence]:
    sentences: List[Sentence] = []
    tokens: List[str] = []
    tags: List[str] = []
    width: Optional[int] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.split()
            if not cols:
                if tokens:
                    sentences.append(Sentence(tokens, tags))
                    tokens, tags = [], []
                continue
            if cols[0] == "-DOCSTART-":
                continue
            if width is None:
                width = len(cols)
            elif len(cols) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(cols)}")
            try:
                tokens.append(cols[token_col])
                tags.append(cols[tag_col])
            except IndexError:
                raise DataError(f"{path}:{lineno}: missing column") from None
    if tokens:
        sentences.append(Sentence(tokens, tags))
    return sentences


def write_column_corpus(path: str, sentences: Iterable[Sentence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            for tok, tag in zip(s.source, s.target):
                fh.write(f"{tok} {tag}\n")
            fh.write("\n")


def read_tokens(path: str) -> List[List[str]]:
    """Untagged input for tagging: one token per line (first column), blank-line separated."""
    out: List[List[str]] = []
    cur: List[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            cols = line.split()
            if not cols:
                if cur:
                    out.append(cur)
                    cur = []
                continue
            cur.append(cols[0])
    if cur:
        out.append(cur)
    return out


def split_word(word: str, space_split: bool) -> List[str]:
    return word.split() if space_split else list(word)


def read_pairs(path: str, space_split: bool = False) -> List[Sentence]:
    """Tab-separated ``source<TAB>target`` lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected source<TAB>target")
            out.append(Sentence(split_word(parts[0], space_split), split_word(parts[1], space_split)))
    return out


def write_pairs(path: str, sentences: Iterable[Sentence], space_split: bool = False) -> None:
    sep = " " if space_split else ""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(f"{sep.join(s.source)}\t{sep.join(s.target)}\n")


# tag schemes ---------------------------------------------------------------------

def split_tag(tag: str) -> Tuple[str, Optional[str]]:
    if tag == "O":
        return "O", None
    prefix, sep, label = tag.partition("-")
    if not sep or prefix not in "BILUES" or len(prefix) != 1 or not label:
        raise DataError(f"unknown tag {tag!r}")
    return prefix, label


def iob1_to_bio(tags: Sequence[str]) -> List[str]:
    """Promote span-initial I- tags (IOB1 style, as in raw CoNLL-2003) to B-."""
    out = []
    prev = "O"
    for tag in tags:
        p, label = split_tag(tag)
        if p == "I":
            pp, plabel = split_tag(prev)
            if pp == "O" or plabel != label:
                tag = f"B-{label}"
        out.append(tag)
        prev = tag
    return out


def bio_spans(tags: Sequence[str]) -> List[Tuple[str, int, int]]:
    """``(label, start, end)`` inclusive spans of a valid BIO sequence."""
    spans = []
    start = label = None
    for i, tag in enumerate(tags):
        p, lab = split_tag(tag)
        if p == "I":
            if label != lab:
                raise DataError(f"invalid BIO: {tag} at {i} does not continue a {lab} span")
            continue
        if label is not None:
            spans.append((label, start, i - 1))
            label = None
        if p == "B":
            start, label = i, lab
        elif p != "O":
            raise DataError(f"invalid BIO tag {tag!r}")
    if label is not None:
        spans.append((label, start, len(tags) - 1))
    return spans


def bilou_encode(tags: Sequence[str]) -> List[str]:
    out = ["O"] * len(tags)
    for label, start, end in bio_spans(tags):
        if start == end:
            out[start] = f"U-{label}"
        else:
            out[start] = f"B-{label}"
            for i in range(start + 1, end):
                out[i] = f"I-{label}"
            out[end] = f"L-{label}"
    return out


def bilou_decode(tags: Sequence[str]) -> List[str]:
    """Inverse of :func:`bilou_encode` for well-formed input."""
    out = []
    for tag in tags:
        p, label = split_tag(tag)
        if p == "O":
            out.append("O")
        elif p in "BU":
            out.append(f"B-{label}")
        else:
            out.append(f"I-{label}")
    return out


# synthetic tasks ---------------------------------------------------------------

@dataclass
class MarkovTask:
    """A generated tagging task together with the parameters that generated it."""

    train: List[Sentence]
    dev: List[Sentence]
    test: List[Sentence]
    start: np.ndarray        # (T,) initial tag distribution
    transition: np.ndarray   # (T, T) row-stochastic
    emission: np.ndarray     # (T, V) row-stochastic
    words: List[str]         # surface form of each word type
    tags: List[str]


def _surface_forms(rng: np.random.Generator, n: int) -> List[str]:
    letters = "abcdefghijklmnopqrstuvwxyz"
    forms: List[str] = []
    seen = set()
    while len(forms) < n:
        k = int(rng.integers(3, 8))
        w = "".join(letters[int(i)] for i in rng.integers(0, 26, size=k))
        style = int(rng.integers(0, 6))
        if style == 0:
            w = w.capitalize()
        elif style == 1:
            w = w.upper()
        elif style == 2:
            w = w + str(int(rng.integers(0, 100)))
        if w not in seen and not is_number(w):
            seen.add(w)
            forms.append(w)
    return forms


def synth_markov_task(n_tags: int = 5, n_words: int = 50, max_len: int = 20,
                      n_train: int = 1000, n_dev: int = 200, n_test: int = 200,
                      strength: float = 0.95, seed: int = 0, emission_noise: float = 0.5,
                      min_len: int = 2) -> MarkovTask:
    """First-order Markov tagging task.

    Each tag has a preferred successor (a random cyclic permutation); a row of
    the transition matrix puts ``strength`` on it and spreads the rest
    uniformly, so ``strength=0`` gives i.i.d. uniform tags. Word types are
    split into one block per tag; a tag emits from its own block with
    probability ``1 - emission_noise`` and uniformly from all words otherwise.
    """
    if n_tags < 2:
        raise ValueError("need at least two tags")
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_tags)
    successor = np.empty(n_tags, dtype=np.int64)
    successor[perm] = np.roll(perm, -1)
    transition = np.full((n_tags, n_tags), (1.0 - strength) / n_tags)
    transition[np.arange(n_tags), successor] += strength
    start = np.full(n_tags, 1.0 / n_tags)

    blocks = np.array_split(rng.permutation(n_words), n_tags)
    emission = np.full((n_tags, n_words), emission_noise / n_words)
    for j, block in enumerate(blocks):
        emission[j, block] += (1.0 - emission_noise) / len(block)

    words = _surface_forms(rng, n_words)
    tags = [f"T{j}" for j in range(n_tags)]

    def sample(n: int) -> List[Sentence]:
        out = []
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            y = [int(rng.choice(n_tags, p=start))]
            for _ in range(length - 1):
                y.append(int(rng.choice(n_tags, p=transition[y[-1]])))
            x = [int(rng.choice(n_words, p=emission[t])) for t in y]
            out.append(Sentence([words[w] for w in x], [tags[t] for t in y]))
        return out

    return MarkovTask(sample(n_train), sample(n_dev), sample(n_test), start, transition, emission, words, tags)


def markov_oracle_accuracy(task: MarkovTask, sentences: Sequence[Sentence], use_transitions: bool) -> float:
    """Token accuracy of Bayes decoders that know the generating parameters.

    With ``use_transitions`` the decoder takes the posterior-marginal argmax
    (forward-backward), which maximizes expected token accuracy; without it,
    each position is decoded from its own word under the stationary prior.
    """
    w_index = {w: i for i, w in enumerate(task.words)}
    t_index = {t: i for i, t in enumerate(task.tags)}
    correct = total = 0
    for s in sentences:
        x = [w_index[w] for w in s.source]
        y = np.array([t_index[t] for t in s.target])
        em = task.emission[:, x].T  # (l, T)
        if use_transitions:
            l, n = em.shape
            alpha = np.zeros((l, n))
            beta = np.ones((l, n))
            alpha[0] = task.start * em[0]
            alpha[0] /= alpha[0].sum()
            for t in range(1, l):
                alpha[t] = (alpha[t - 1] @ task.transition) * em[t]
                alpha[t] /= alpha[t].sum()
            for t in range(l - 2, -1, -1):
                beta[t] = task.transition @ (em[t + 1] * beta[t + 1])
                beta[t] /= beta[t].sum()
            pred = np.argmax(alpha * beta, axis=1)
        else:
            pred = np.argmax(em * task.start, axis=1)
        correct += int(np.sum(pred == y))
        total += len(y)
    return correct / max(total, 1)


def synth_transliteration_task(n_train: int = 400, n_dev: int = 80, n_test: int = 80,
                               min_len: int = 2, max_len: int = 6, seed: int = 0) -> Tuple[List[Sentence], List[Sentence], List[Sentence]]:
    """Toy monotone transduction: each source letter rewrites to 0-2 target letters."""
    rng = np.random.default_rng(seed)
    src_alpha = list("abcdefgh")
    tgt_alpha = list("ABCDEFGHIJ")
    rules = {}
    for ch in src_alpha:
        k = int(rng.choice([0, 1, 1, 1, 2]))
        rules[ch] = [tgt_alpha[int(i)] for i in rng.integers(0, len(tgt_alpha), size=k)]

    def sample(n):
        out = []
        while len(out) < n:
            k = int(rng.integers(min_len, max_len + 1))
            src = [src_alpha[int(i)] for i in rng.integers(0, len(src_alpha), size=k)]
            tgt = [c for ch in src for c in rules[ch]]
            if tgt:
                out.append(Sentence(src, tgt))
        return out

    return sample(n_train), sample(n_dev), sample(n_test)


# vocabularies for a task -------------------------------------------------------

@dataclass
class Vocabs:
    """Vocabularies for one task.

    In labeling mode ``source`` holds words and ``chars`` their characters;
    in transduction mode ``source`` holds source characters and ``chars`` is
    unused.
    """

    mode: str
    source: Vocabulary
    targets: Vocabulary
    chars: Optional[Vocabulary] = None
    lowercase: bool = False

    @classmethod
    def build(cls, sentences: Sequence[Sentence], mode: str = "label", min_freq: int = 2,
              lowercase: bool = False) -> "Vocabs":
        if mode == "label":
            words = Vocabulary.build((normalize(t, lowercase) for s in sentences for t in s.source),
                                     WORD_RESERVED, min_freq)
            chars = Vocabulary.build((c for s in sentences for t in s.source for c in t), CHAR_RESERVED)
            tags = Vocabulary.build(t for s in sentences for t in s.target)
            return cls(mode, words, tags, chars, lowercase)
        if mode == "transduce":
            src = Vocabulary.build((c for s in sentences for c in s.source), CHAR_RESERVED)
            tgt = Vocabulary.build((c for s in sentences for c in s.target), TARGET_RESERVED)
            return cls(mode, src, tgt, None, lowercase)
        raise ValueError(f"unknown mode {mode!r}")

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def encode(self, sentence: Sentence, with_target: bool = True) -> LabeledExample:
        src = sentence.source
        if self.mode == "label":
            words = self.source.ids(preprocess(t, self.source, self.lowercase) for t in src)
            chars = [self.chars.ids(t) for t in src]
            caps = np.stack([cap_flags(t) for t in src]) if src else np.zeros((0, 4))
            if with_target:
                if len(sentence.target) != len(src):
                    raise DataError("token and tag counts differ")
                for t in sentence.target:
                    if t not in self.targets:
                        raise DataError(f"tag {t!r} not in the model's tag set")
                tags = self.targets.ids(sentence.target)
            else:
                tags = np.zeros(0, dtype=np.int64)
        else:
            words = self.source.ids(src)
            chars = []
            caps = np.zeros((len(src), 4))
            tags = self.targets.ids(sentence.target) if with_target else np.zeros(0, dtype=np.int64)
        return LabeledExample(words, tags, chars, caps, list(src))

    def digest(self) -> str:
        parts = [self.mode, self.source.digest(), self.targets.digest()]
        if self.chars is not None:
            parts.append(self.chars.digest())
        return hashlib.sha1("|".join(parts).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "lowercase": self.lowercase,
            "source": [self.source.itos, self.source.n_reserved],
            "targets": [self.targets.itos, self.targets.n_reserved],
            "chars": None if self.chars is None else [self.chars.itos, self.chars.n_reserved],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabs":
        chars = None if d["chars"] is None else Vocabulary(*d["chars"])
        return cls(d["mode"], Vocabulary(*d["source"]), Vocabulary(*d["targets"]), chars, d["lowercase"])
