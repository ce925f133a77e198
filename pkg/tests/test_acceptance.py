"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one ``criterion N PASS|FAIL`` line, printed in the pytest
summary; run with ``-s`` to see them as they happen.
"""
import dataclasses
import itertools
import time

import numpy as np
import pytest

from seqlab import decoders as dec
from seqlab.autodiff import Tape, backward
from seqlab.cli import main
from seqlab.config import dump_config
from seqlab.data import Vocabs, synth_markov_task
from seqlab.evaluation import beam_search, beam_search_scored, entity_f1, extract_entities, t_test
from seqlab.experiments import synthetic_comparison
from seqlab.model import teacher_policy
from seqlab.runner import transduce_max_len
from seqlab.training import (Optimizers, ac_rollout, ac_train_step, batch_td_returns, critic_loss,
                             critic_semi_gradient, critic_values, greedy_rollout, inverse_sigmoid,
                             ml_loss, monte_carlo_returns, policy_loss, td_returns)

from conftest import ACCEPTANCE, make_model, perturb, tiny_cfg
from test_decoders import brute_force, random_potentials
from test_evaluation import GOLD, PRED, SPAN_FIXTURE, T_FIXTURES, t_pvalue_by_quadrature
from test_training import critic_constant, self_labeled


def report(n, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def sampled_grad_error(tables, loss_fn, rng, per_tensor=2, eps=1e-6):
    """Relative error of backward() against central differences at a few entries of every tensor."""
    tape = Tape()
    grads = backward(tape, loss_fn(tape))
    worst = 0.0
    for name in sorted(grads):
        arr = next(t[name] for t in tables if name in t)
        flat, g = arr.reshape(-1), grads[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(Tape(grad=False)).value)
            flat[i] = orig - eps
            down = float(loss_fn(Tape(grad=False)).value)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-2))
    return worst


def small_label_task(seed, n=6):
    task = synth_markov_task(n_tags=3, n_words=12, max_len=5, n_train=n, n_dev=0, n_test=0, seed=seed)
    vocabs = Vocabs.build(task.train, "label", min_freq=1)
    return task.train, vocabs


# 1 ---------------------------------------------------------------------------------------------

def test_criterion_1_gradients(trans_data, trans_vocabs):
    t0 = time.process_time()
    rng = np.random.default_rng(0)
    trans_train = trans_data[0]
    max_len = transduce_max_len(tiny_cfg(mode="transduce"), trans_train)
    worst, count = {}, 0
    for seed in range(20):
        sents, vocabs = small_label_task(100 + seed, 3)
        batch = [vocabs.encode(s) for s in sents]
        tbatch = [trans_vocabs.encode(s) for s in trans_train[seed % 9: seed % 9 + 3]]
        cases = {}
        for head in ("indp", "crf", "rnn"):
            m = perturb(make_model(vocabs, seed, head=head), seed, 0.3)
            cases[f"ml/{head}"] = (m, lambda tape, m=m: ml_loss(m, tape, batch))
        for head in ("crf", "rnn"):
            m = perturb(make_model(trans_vocabs, seed, max_len, head=head, mode="transduce"), seed, 0.3)
            cases[f"ml/{head}/transduce"] = (m, lambda tape, m=m: ml_loss(m, tape, tbatch))

        m = perturb(make_model(vocabs, seed, head="rnn"), seed, 0.3)
        ro = greedy_rollout(m, Tape(grad=False), batch)
        coef = rng.normal(size=ro.mask.shape)

        def actor(tape, m=m, ro=ro, coef=coef):
            tr = m.unroll(tape, m.encode(tape, batch), teacher_policy, ro.predictions, ro.mask)
            return policy_loss(tape, tr.logp_scored, coef, ro.mask)

        def critic(tape, m=m, ro=ro, g=rng.normal(size=ro.mask.shape)):
            return critic_loss(tape, critic_values(m, tape, ro.trace), g, ro.mask)

        cases["actor"] = (m, actor)
        cases["critic"] = (m, critic)
        for name, (model, fn) in cases.items():
            err = sampled_grad_error([model.params, model.critic], fn, rng)
            worst[name] = max(worst.get(name, 0.0), err)
            count += 1
    elapsed = time.process_time() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    report(1, not bad and elapsed < 60,
           f"{count} checks over {len(worst)} losses, worst rel err {max(worst.values()):.1e}, {elapsed:.0f}s CPU")


# 2, 3 -----------------------------------------------------------------------------------------

def test_criterion_2_crf_brute_force():
    t0 = time.process_time()
    rng = np.random.default_rng(2)
    worst, paths_ok = 0.0, True
    for _ in range(100):
        T, l = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        pot = random_potentials(rng, l, T)
        paths, scores, log_z, best = brute_force(pot)
        worst = max(worst, abs(dec.crf_log_z(pot) - log_z))
        for p, s in zip(paths, scores):
            worst = max(worst, abs(dec.crf_log_likelihood(pot, p) - (s - log_z)))
        paths_ok &= dec.crf_viterbi(pot) == best
    elapsed = time.process_time() - t0
    report(2, worst < 1e-8 and paths_ok and elapsed < 30,
           f"100 instances, max log-space error {worst:.1e}, viterbi paths identical: {paths_ok}, {elapsed:.1f}s")


def test_criterion_3_crf_normalization():
    rng = np.random.default_rng(3)
    worst = 0.0
    for T in (1, 2, 3):
        for l in (1, 2, 3, 4):
            for _ in range(5):
                pot = random_potentials(rng, l, T)
                total = sum(np.exp(dec.crf_log_likelihood(pot, p)) for p in itertools.product(range(T), repeat=l))
                worst = max(worst, abs(total - 1.0))
    report(3, worst < 1e-8, f"max |sum p - 1| = {worst:.1e} over T<=3, l<=4")


# 4 --------------------------------------------------------------------------------------------------

def _seq_logp(model, ex, tags):
    tape = Tape(grad=False)
    return float(model.log_likelihood(tape, [dataclasses.replace(ex, tags=np.array(tags))]).value[0])


def test_criterion_4_beam_oracle(trans_data, trans_vocabs):
    exact = greedy = 0
    ok = True
    for seed in range(8):
        sents, vocabs = small_label_task(200 + seed)
        model = perturb(make_model(vocabs, seed, head="rnn"), seed, 0.8)
        T = vocabs.n_targets
        exs = [vocabs.encode(s) for s in sents if len(s.source) <= 4]
        for ex in exs:
            paths = list(itertools.product(range(T), repeat=ex.length))
            scores = [_seq_logp(model, ex, p) for p in paths]
            ok &= beam_search(model, ex, T ** ex.length) == list(paths[int(np.argmax(scores))])
            exact += 1
        all_exs = [vocabs.encode(s) for s in sents]
        ok &= [beam_search(model, ex, 1) for ex in all_exs] == model.predict(all_exs, beam=1)
        greedy += len(all_exs)
        tmodel = perturb(make_model(trans_vocabs, seed, 8, head="rnn", mode="transduce"), seed)
        texs = [trans_vocabs.encode(s) for s in trans_data[0]]
        ok &= [beam_search(tmodel, ex, 1) for ex in texs] == tmodel.predict(texs, beam=1)
        greedy += len(texs)
    report(4, ok and exact >= 10, f"{exact} exhaustive and {greedy} greedy comparisons, all equal: {ok}")


# 5, 6, 7 ---------------------------------------------------------------------------------------------

def test_criterion_5_gating():
    episodes, violations = 0, 0
    seed = 0
    while episodes < 1000:
        sents, vocabs = synth_markov_task(n_tags=3, n_words=12, max_len=6, n_train=50, n_dev=0, n_test=0,
                                          seed=300 + seed).train, None
        vocabs = Vocabs.build(sents, "label", min_freq=1)
        model = perturb(make_model(vocabs, seed, n_steps=1 + seed % 4), seed, 0.8)
        ro, _ = ac_rollout(model, Tape(), Tape(), [vocabs.encode(s) for s in sents])
        live = ro.mask > 0
        correct = ro.predictions == ro.gold
        violations += int(((correct & (ro.adjusted < 0)) | (~correct & (ro.adjusted > 0)))[live].sum())
        episodes += len(sents)
        seed += 1

    sents, vocabs = small_label_task(7, 4)
    model = perturb(make_model(vocabs, 1, n_steps=100), 1, 0.5)
    batch = self_labeled(model, [vocabs.encode(s) for s in sents])
    critic_constant(model, 50.0)
    ro, _ = ac_rollout(model, Tape(), Tape(), batch)
    all_zero = bool(np.all(ro.adjusted == 0)) and bool(np.any(ro.advantages != 0))
    actor = {k: v.copy() for k, v in model.params.items()}
    critic = {k: v.copy() for k, v in model.critic.items()}
    ac_train_step(model, batch, Optimizers())
    frozen = all(np.array_equal(actor[k], model.params[k]) for k in actor)
    moved = any(not np.array_equal(critic[k], model.critic[k]) for k in critic)
    report(5, violations == 0 and all_zero and frozen and moved,
           f"{episodes} rollouts, {violations} sign violations; zero-gated batch: actor unchanged {frozen}, "
           f"critic updated {moved}")


def test_criterion_6_semi_gradient():
    worst, differs = 0.0, 0
    runs = 5
    for seed in range(runs):
        sents, vocabs = small_label_task(400 + seed, 12)
        sents = [x for x in sents if len(x.source) > 2][:3]
        model = perturb(make_model(vocabs, seed, n_steps=2), seed, 0.5)
        ro = greedy_rollout(model, Tape(), [vocabs.encode(s) for s in sents])
        n, B = model.cfg.n_steps, ro.mask.shape[0]
        assert n < ro.mask.sum(axis=1).min()

        def values():
            return np.stack([v.value for v in critic_values(model, Tape(grad=False), ro.trace)], axis=1) * ro.mask

        G = batch_td_returns(ro.rewards, values(), ro.mask, n)
        frozen = lambda: float(((G - values()) ** 2 * ro.mask).sum() / B)
        full = lambda: float(((batch_td_returns(ro.rewards, values(), ro.mask, n) - values()) ** 2).sum() / B)
        analytic = critic_semi_gradient(model, ro.trace, G, ro.mask)
        gap = 0.0
        for k, arr in model.critic.items():
            flat, g = arr.reshape(-1), analytic[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-6
                fp, up = frozen(), full()
                flat[i] = orig - 1e-6
                fm, um = frozen(), full()
                flat[i] = orig
                fd, fd_full = (fp - fm) / 2e-6, (up - um) / 2e-6
                worst = max(worst, abs(fd - g[i]) / max(abs(fd), 1.0))
                gap = max(gap, abs(fd_full - g[i]))
        differs += gap > 1e-4
    report(6, worst < 1e-4 and differs == runs,
           f"semi-gradient vs frozen-G differences: max err {worst:.1e}; differs from full gradient in "
           f"{differs}/{runs} cases")


def test_criterion_7_td_identities():
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(500):
        l = int(rng.integers(1, 15))
        r = rng.integers(0, 2, l).astype(float)
        g = td_returns(r, np.zeros(l), l + int(rng.integers(0, 5)))
        ok &= all(g[t] == r[t] + g[t + 1] for t in range(l - 1)) and g[-1] == r[-1]
        ok &= np.array_equal(g, monte_carlo_returns(r[None], np.ones((1, l)))[0])
    B, L = 6, 9
    r = rng.integers(0, 2, (B, L)).astype(float)
    mask = (np.arange(L)[None] < rng.integers(1, L + 1, B)[:, None]).astype(float)
    ok &= np.array_equal(batch_td_returns(r * mask, np.zeros((B, L)), mask, L), monte_carlo_returns(r, mask))
    report(7, bool(ok), "telescoping holds exactly; n = l returns equal Monte-Carlo credits on 500 random vectors")


# 8 -----------------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_synthetic_orderings():
    t0 = time.process_time()
    cmp = synthetic_comparison(seeds=(0, 1, 2, 3, 4))
    elapsed = time.process_time() - t0
    s = cmp.summary()
    rnn_gap, crf_gap = s["rnn"] - s["indp"], s["crf"] - s["indp"]
    no_degrade = s["ac_final"] >= s["ac_start"]
    wins = int(s["ac_wins"])
    parts = [f"dev acc indp {s['indp']:.4f} crf {s['crf']:.4f} rnn {s['rnn']:.4f}",
             f"AC start {s['ac_start']:.4f} final {s['ac_final']:.4f}",
             f"AC beats REINFORCE at final epoch on {wins}/5 seeds", f"{elapsed:.0f}s CPU"]
    ok = rnn_gap >= 0.01 and crf_gap >= 0.01 and no_degrade and wins >= 4 and elapsed < 1800
    report(8, ok, "; ".join(parts))


# 9, 10, 11 -------------------------------------------------------------------------------------------------

def test_criterion_9_metric_oracles():
    spans_ok = all(extract_entities(tags) == spans for tags, spans in SPAN_FIXTURE)
    f1_ok = entity_f1(GOLD, PRED) == (4 / 12, 4 / 12, entity_f1(GOLD, PRED)[2]) and \
        abs(entity_f1(GOLD, PRED)[2] - 1 / 3) < 1e-15
    worst = max(abs(t_test(a, b) - t_pvalue_by_quadrature(a, b)) for a, b in T_FIXTURES)
    report(9, spans_ok and f1_ok and worst < 1e-3,
           f"{len(SPAN_FIXTURE) + len(GOLD)} fixture sentences exact: {spans_ok and f1_ok}; "
           f"t-test max |dp| {worst:.1e} on {len(T_FIXTURES)} pairs")


def test_criterion_10_schedule_monotone():
    ks = np.linspace(1.0, 40.0, 20)
    epochs = np.arange(20)
    eps = np.array([[inverse_sigmoid(i, k) for i in epochs] for k in ks])
    in_k = bool(np.all(np.diff(eps, axis=0) > 0))
    in_i = bool(np.all(np.diff(eps, axis=1) < 0))
    report(10, in_k and in_i, f"20x20 grid: increasing in k {in_k}, decreasing in epoch {in_i}")


def test_criterion_11_determinism(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(dump_config(tiny_cfg(min_word_freq=1, epochs=3, dropout=0.3)))
    runs = [("--head", "indp"), ("--head", "crf"), ("--head", "rnn"),
            ("--head", "rnn", "--objective", "scheduled-sampling"),
            ("--head", "rnn", "--set", "mode=transduce"), ("--head", "crf", "--set", "mode=transduce")]
    same = 0
    for i, extra in enumerate(runs):
        logs = []
        for rep in range(2):
            out = tmp_path / f"r{i}_{rep}"
            assert main(["train", "--config", str(cfg), "--seed", "11", "--out", str(out), *extra]) == 0
            logs.append((out / "metrics.csv").read_bytes())
        same += logs[0] == logs[1]
    report(11, same == len(runs), f"{same}/{len(runs)} train commands produced identical metric CSVs")
