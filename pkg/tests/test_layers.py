import numpy as np
import pytest

from seqlab.autodiff import ContractError, ShapeError, Tape, backward, check_gradients
from seqlab.layers import (bidir_final, bidir_run, critic_forward, init_critic, init_linear, init_lstm,
                           linear, load_embeddings, lstm_step, run_lstm)

TOL = 1e-4


def _lstm_params(rng, n_in=3, n=4):
    p = {}
    init_lstm(p, rng, "l", n_in, n)
    for k in p:
        p[k] = p[k] + rng.normal(0, 0.3, p[k].shape)
    return p


def lstm_reference(p, xs, n):
    """Plain numpy LSTM with gate order input, forget, cell, output."""
    sig = lambda z: 1 / (1 + np.exp(-z))
    h = np.zeros((xs.shape[1], n))
    c = np.zeros_like(h)
    out = []
    for x in xs:
        z = x @ p["l.w_x"].T + h @ p["l.w_h"].T + p["l.b"]
        i, f, g, o = sig(z[:, :n]), sig(z[:, n:2 * n]), np.tanh(z[:, 2 * n:3 * n]), sig(z[:, 3 * n:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return out


def test_lstm_init_layout():
    p = {}
    init_lstm(p, np.random.default_rng(0), "l", 5, 3)
    assert p["l.w_x"].shape == (12, 5) and p["l.w_h"].shape == (12, 3)
    assert np.all(p["l.b"][3:6] == 1.0) and np.all(p["l.b"][:3] == 0) and np.all(p["l.b"][6:] == 0)
    assert np.abs(p["l.w_x"]).max() <= 0.1


def test_lstm_matches_reference():
    rng = np.random.default_rng(1)
    p = _lstm_params(rng)
    xs = rng.normal(size=(5, 2, 3))
    tape = Tape()
    hs = run_lstm(tape, p, "l", [tape.constant(x) for x in xs])
    for a, b in zip(hs, lstm_reference(p, xs, 4)):
        np.testing.assert_allclose(a.value, b, atol=1e-12)


def test_lstm_gradients():
    rng = np.random.default_rng(2)
    for seed in range(3):
        p = _lstm_params(np.random.default_rng(seed))
        p.update({k.replace("l.", "r."): v for k, v in _lstm_params(np.random.default_rng(seed + 10)).items()})
        p["x"] = rng.normal(size=(4, 2, 3))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)

        def build(tape):
            x = tape.param("x", p["x"])
            xs = [tape.reshape(tape.slice(x, t, t + 1, axis=0), (2, 3)) for t in range(4)]
            hs = bidir_run(tape, p, "l", "r", xs, mask)
            return tape.sum(tape.tanh(tape.stack(hs)) * 0.7)

        assert max(check_gradients(build, p).values()) < TOL


def test_masked_steps_freeze_state():
    rng = np.random.default_rng(3)
    p = _lstm_params(rng)
    tape = Tape()
    h0 = (tape.constant(rng.normal(size=(2, 4))), tape.constant(rng.normal(size=(2, 4))))
    h1, c1 = lstm_step(tape, p, "l", tape.constant(rng.normal(size=(2, 3))), h0, np.array([[1.0], [0.0]]))
    assert np.array_equal(h1.value[1], h0[0].value[1]) and np.array_equal(c1.value[1], h0[1].value[1])
    assert not np.allclose(h1.value[0], h0[0].value[0])


def test_padding_does_not_change_real_positions():
    rng = np.random.default_rng(4)
    p = _lstm_params(rng)
    p.update({k.replace("l.", "r."): v for k, v in _lstm_params(rng).items()})
    xs = rng.normal(size=(3, 1, 3))
    tape = Tape()
    short = bidir_run(tape, p, "l", "r", [tape.constant(x) for x in xs])
    padded = np.concatenate([xs, rng.normal(size=(2, 1, 3))])
    mask = np.array([[1, 1, 1, 0, 0]], dtype=float)
    long = bidir_run(tape, p, "l", "r", [tape.constant(x) for x in padded], mask)
    for a, b in zip(short, long[:3]):
        np.testing.assert_allclose(a.value, b.value, atol=1e-12)
    fin_short = bidir_final(tape, p, "l", "r", [tape.constant(x) for x in xs], np.ones((1, 3)))
    fin_long = bidir_final(tape, p, "l", "r", [tape.constant(x) for x in padded], mask)
    np.testing.assert_allclose(fin_short.value, fin_long.value, atol=1e-12)


def test_shape_errors():
    rng = np.random.default_rng(5)
    p = _lstm_params(rng)
    init_linear(p, rng, "lin", 3, 2)
    tape = Tape()
    with pytest.raises(ShapeError):
        lstm_step(tape, p, "l", tape.constant(np.ones((1, 5))), (tape.constant(np.zeros((1, 4))),) * 2)
    with pytest.raises(ShapeError):
        linear(tape, p, "lin", tape.constant(np.ones((1, 4))))
    with pytest.raises(ContractError):
        bidir_run(tape, p, "l", "l", [])


def test_critic_is_detached_from_inputs():
    rng = np.random.default_rng(6)
    p = {}
    init_critic(p, rng, 5, 4)
    tape = Tape()
    d = tape.param("d", rng.normal(size=(2, 3)))
    c = tape.param("c", rng.normal(size=(2, 2)))
    v = critic_forward(tape, p, d, c)
    assert v.value.shape == (2,)
    g = backward(tape, tape.sum(v * v))
    assert not np.any(g["d"]) and not np.any(g["c"])
    assert np.any(g["critic.l1.w"])


def test_critic_gradients():
    rng = np.random.default_rng(7)
    p = {}
    init_critic(p, rng, 5, 4)
    for k in p:
        p[k] = p[k] + rng.normal(0, 0.5, p[k].shape)
    x = rng.normal(size=(3, 5))

    def build(tape):
        v = critic_forward(tape, p, tape.constant(x[:, :3]), tape.constant(x[:, 3:]))
        return tape.sum(v * v)

    assert max(check_gradients(build, p).values()) < TOL


def test_load_embeddings(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("the 1 2\nmissing 3 4\ncat 5 6\n")
    table = np.zeros((3, 2))
    n = load_embeddings(str(path), {"the": 0, "cat": 2}, table)
    assert n == 2
    np.testing.assert_array_equal(table, [[1, 2], [0, 0], [5, 6]])
    path.write_text("the 1 2 3\n")
    with pytest.raises(ValueError):
        load_embeddings(str(path), {"the": 0}, table)
