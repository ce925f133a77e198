import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqlab import decoders as dec
from seqlab.autodiff import ShapeError, Tape, check_gradients
from seqlab.evaluation import beam_search, beam_search_scored
from seqlab.model import greedy_policy

from conftest import make_model, perturb


def random_potentials(rng, l, T, scale=1.5):
    return dec.CrfPotentials(rng.normal(0, scale, (l, T)), rng.normal(0, scale, (T, T)),
                             rng.normal(0, scale, T), rng.normal(0, scale, T))


def brute_force(pot):
    l, T = pot.emissions.shape
    paths = list(itertools.product(range(T), repeat=l))
    scores = np.array([dec.crf_path_score(pot, p) for p in paths])
    m = scores.max()
    log_z = m + np.log(np.exp(scores - m).sum())
    best = paths[int(np.argmax(scores))]   # argmax takes the first maximal (lowest lexicographic)
    return paths, scores, log_z, list(best)


def test_crf_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T, l = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        pot = random_potentials(rng, l, T)
        paths, scores, log_z, best = brute_force(pot)
        assert abs(dec.crf_log_z(pot) - log_z) < 1e-8
        assert dec.crf_viterbi(pot) == best
        for p, s in zip(paths[:5], scores[:5]):
            assert abs(dec.crf_log_likelihood(pot, p) - (s - log_z)) < 1e-8


def test_crf_normalizes():
    rng = np.random.default_rng(1)
    for T in (1, 2, 3):
        for l in (1, 2, 3, 4):
            pot = random_potentials(rng, l, T)
            total = sum(np.exp(dec.crf_log_likelihood(pot, p)) for p in itertools.product(range(T), repeat=l))
            assert abs(total - 1.0) < 1e-8


def test_crf_single_tag_and_errors():
    pot = dec.CrfPotentials.zeros(3, 1)
    assert dec.crf_log_likelihood(pot, [0, 0, 0]) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        dec.crf_path_score(dec.CrfPotentials.zeros(2, 2), [0, 2])
    with pytest.raises(ShapeError):
        dec.crf_path_score(dec.CrfPotentials.zeros(2, 2), [0])


def test_viterbi_ties_go_to_lowest_index():
    assert dec.crf_viterbi(dec.CrfPotentials.zeros(3, 3)) == [0, 0, 0]


def test_crf_zero_transitions_equals_independent_softmax():
    rng = np.random.default_rng(2)
    em = rng.normal(size=(4, 3))
    tags = [2, 0, 1, 1]
    indp = sum(em[t, y] - np.log(np.exp(em[t]).sum()) for t, y in enumerate(tags))
    pot = dec.CrfPotentials(em, np.zeros((3, 3)), np.zeros(3), np.zeros(3))
    assert dec.crf_log_likelihood(pot, tags) == pytest.approx(indp, abs=1e-12)


def test_batched_crf_matches_reference():
    rng = np.random.default_rng(3)
    T, B, L = 3, 4, 5
    params = {"crf.trans": rng.normal(size=(T, T)), "crf.start": rng.normal(size=T), "crf.stop": rng.normal(size=T)}
    lengths = np.array([5, 3, 1, 4])
    mask = (np.arange(L)[None] < lengths[:, None]).astype(float)
    em = rng.normal(size=(B, L, T))
    tags = rng.integers(0, T, (B, L))
    tape = Tape()
    ll = dec.crf_batch_log_likelihood(tape, params, [tape.constant(em[:, t]) for t in range(L)], tags, mask)
    for b in range(B):
        n = lengths[b]
        ref = dec.crf_log_likelihood(dec.crf_potentials(params, em[b, :n]), tags[b, :n])
        assert ll.value[b] == pytest.approx(ref, abs=1e-10)


def test_batched_crf_gradients():
    rng = np.random.default_rng(4)
    T, B, L = 3, 2, 3
    params = {"crf.trans": rng.normal(size=(T, T)), "crf.start": rng.normal(size=T), "crf.stop": rng.normal(size=T),
              "em": rng.normal(size=(B, L, T))}
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    tags = rng.integers(0, T, (B, L))

    def build(tape):
        em = tape.param("em", params["em"])
        ems = [tape.reshape(tape.slice(em, t, t + 1, axis=1), (B, T)) for t in range(L)]
        return tape.sum(dec.crf_batch_log_likelihood(tape, params, ems, tags, mask))

    assert max(check_gradients(build, params).values()) < 1e-4


def test_attention_weights_sum_to_one_and_respect_mask():
    rng = np.random.default_rng(5)
    params = {"dec.att": rng.normal(size=(4, 6))}
    tape = Tape()
    Hs = tape.constant(rng.normal(size=(2, 3, 6)))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    c, alpha = dec.attention_context(tape, params, tape.constant(rng.normal(size=(2, 4))), Hs, mask)
    np.testing.assert_allclose(alpha.value.sum(axis=1), 1.0)
    assert alpha.value[1, 2] < 1e-12
    np.testing.assert_allclose(c.value, np.einsum("bl,bld->bd", alpha.value, Hs.value))


def test_strip_padding_and_transduce_padding():
    assert dec.strip_padding(["a", "b", "PAD", "c"], {"PAD"}) == ["a", "b"]
    s, t = dec.crf_pad_transduce(["a"], ["x", "y"], 3, "P")
    assert s == ["a", "P", "P"] and t == ["x", "y", "P"]
    with pytest.raises(ValueError):
        dec.crf_pad_transduce(["a"] * 4, [], 3, "P")


# beam search -----------------------------------------------------------------------------

def _seq_logp(model, ex, tags):
    tape = Tape(grad=False)
    return float(model.log_likelihood(tape, [dataclasses.replace(ex, tags=np.array(tags))]).value[0])


def test_beam_matches_exhaustive_search(label_task, label_vocabs):
    T = label_vocabs.n_targets
    checked = 0
    for seed in range(6):
        model = perturb(make_model(label_vocabs, seed=seed, head="rnn"), seed, scale=0.8)
        for sent in label_task.train[:6]:
            ex = label_vocabs.encode(sent)
            if ex.length > 4:
                continue
            paths = list(itertools.product(range(T), repeat=ex.length))
            scores = [_seq_logp(model, ex, p) for p in paths]
            best = list(paths[int(np.argmax(scores))])
            ids, score = beam_search_scored(model, ex, T ** ex.length)
            assert ids == best
            assert score == pytest.approx(max(scores), abs=1e-9)
            for width in (1, 2, 3):
                assert beam_search_scored(model, ex, width)[1] <= max(scores) + 1e-9
            checked += 1
    assert checked >= 10


def test_beam_one_is_greedy(label_task, label_vocabs, trans_data, trans_vocabs):
    for seed in range(3):
        model = perturb(make_model(label_vocabs, seed=seed, head="rnn"), seed)
        exs = [label_vocabs.encode(s) for s in label_task.dev]
        assert [beam_search(model, ex, 1) for ex in exs] == model.predict(exs, beam=1)
        tmodel = perturb(make_model(trans_vocabs, seed=seed, head="rnn", mode="transduce", max_len=8), seed)
        exs = [trans_vocabs.encode(s) for s in trans_data[1]]
        assert [beam_search(tmodel, ex, 1) for ex in exs] == tmodel.predict(exs, beam=1)


def test_beam_uniform_scores_pick_first_sequence(label_task, label_vocabs):
    model = make_model(label_vocabs, head="rnn")
    model.params["dec.out.w"][:] = 0.0
    model.params["dec.out.b"][:] = 0.0
    ex = label_vocabs.encode(label_task.train[0])
    assert beam_search(model, ex, 5) == [0] * ex.length


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_beam_never_exceeds_optimum(seed):
    from seqlab.data import synth_markov_task, Vocabs
    task = synth_markov_task(n_tags=2, n_words=6, max_len=4, n_train=3, n_dev=0, n_test=0, seed=seed)
    vocabs = Vocabs.build(task.train, "label", min_freq=1)
    model = perturb(make_model(vocabs, seed=seed, head="rnn"), seed, scale=1.0)
    ex = vocabs.encode(task.train[0])
    opt = beam_search_scored(model, ex, 2 ** ex.length)[1]
    for width in range(1, 2 ** ex.length):
        assert beam_search_scored(model, ex, width)[1] <= opt + 1e-9
