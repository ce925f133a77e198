"""Parameterized layers built from tape ops.

Parameters live in a flat ``dict`` mapping dotted names to numpy arrays; a
layer is identified by its name prefix. Weight matrices are stored
``(out, in)``; layers multiply by their transpose, cached once per tape.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import DTYPE, ContractError, Node, ShapeError, Tape

Params = Dict[str, np.ndarray]

INIT_SCALE = 0.1
FORGET_BIAS = 1.0


def _uniform(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(DTYPE)


def init_linear(params: Params, rng: np.random.Generator, prefix: str, n_in: int, n_out: int) -> None:
    params[f"{prefix}.w"] = _uniform(rng, (n_out, n_in))
    params[f"{prefix}.b"] = np.zeros(n_out, dtype=DTYPE)


def init_embedding(params: Params, rng: np.random.Generator, name: str, n_rows: int, dim: int) -> None:
    params[name] = _uniform(rng, (n_rows, dim))


def init_lstm(params: Params, rng: np.random.Generator, prefix: str, n_in: int, n_hidden: int) -> None:
    """Gate blocks are stacked row-wise in the order input, forget, cell, output."""
    params[f"{prefix}.w_x"] = _uniform(rng, (4 * n_hidden, n_in))
    params[f"{prefix}.w_h"] = _uniform(rng, (4 * n_hidden, n_hidden))
    b = np.zeros(4 * n_hidden, dtype=DTYPE)
    b[n_hidden:2 * n_hidden] = FORGET_BIAS
    params[f"{prefix}.b"] = b


def weight_t(tape: Tape, params: Params, name: str) -> Node:
    key = ("T", name)
    node = tape.memo.get(key)
    if node is None:
        node = tape.transpose(tape.param(name, params[name]))
        tape.memo[key] = node
    return node


def linear(tape: Tape, params: Params, prefix: str, x: Node) -> Node:
    w = params[f"{prefix}.w"]
    if x.value.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear {prefix}: input dim {x.value.shape[-1]} != {w.shape[1]}")
    return tape.matmul(x, weight_t(tape, params, f"{prefix}.w")) + tape.param(f"{prefix}.b", params[f"{prefix}.b"])


def embed(tape: Tape, params: Params, name: str, ids) -> Node:
    return tape.embedding(tape.param(name, params[name]), ids)


def lstm_hidden_size(params: Params, prefix: str) -> int:
    return params[f"{prefix}.w_h"].shape[1]


def lstm_zero_state(params: Params, prefix: str, batch: int, tape: Tape) -> Tuple[Node, Node]:
    n = lstm_hidden_size(params, prefix)
    return tape.constant(np.zeros((batch, n))), tape.constant(np.zeros((batch, n)))


def lstm_step(tape: Tape, params: Params, prefix: str, x: Node, state: Tuple[Node, Node],
              mask: Optional[np.ndarray] = None) -> Tuple[Node, Node]:
    """One LSTM transition on a batch ``x`` of shape ``(B, n_in)``.

    ``mask`` of shape ``(B, 1)`` freezes the state of rows where it is zero,
    which is how right-padded batches are handled.
    """
    h, c = state
    w_x = params[f"{prefix}.w_x"]
    n = w_x.shape[0] // 4
    if x.value.shape[-1] != w_x.shape[1]:
        raise ShapeError(f"lstm {prefix}: input dim {x.value.shape[-1]} != {w_x.shape[1]}")
    if h.value.shape[-1] != n:
        raise ShapeError(f"lstm {prefix}: state dim {h.value.shape[-1]} != {n}")
    z = (tape.matmul(x, weight_t(tape, params, f"{prefix}.w_x"))
         + tape.matmul(h, weight_t(tape, params, f"{prefix}.w_h"))
         + tape.param(f"{prefix}.b", params[f"{prefix}.b"]))
    i = tape.sigmoid(tape.slice(z, 0, n))
    f = tape.sigmoid(tape.slice(z, n, 2 * n))
    g = tape.tanh(tape.slice(z, 2 * n, 3 * n))
    o = tape.sigmoid(tape.slice(z, 3 * n, 4 * n))
    c_new = f * c + i * g
    h_new = o * tape.tanh(c_new)
    if mask is not None:
        m = tape.constant(mask)
        c_new = c + m * (c_new - c)
        h_new = h + m * (h_new - h)
    return h_new, c_new


def run_lstm(tape: Tape, params: Params, prefix: str, inputs: Sequence[Node],
             mask: Optional[np.ndarray] = None, reverse: bool = False) -> List[Node]:
    """Hidden states for every position; ``mask`` is ``(B, L)`` or None."""
    batch = inputs[0].value.shape[0]
    state = lstm_zero_state(params, prefix, batch, tape)
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    outputs: List[Optional[Node]] = [None] * len(inputs)
    for t in order:
        m = None if mask is None else mask[:, t:t + 1]
        state = lstm_step(tape, params, prefix, inputs[t], state, m)
        outputs[t] = state[0]
    return outputs


def bidir_run(tape: Tape, params: Params, fwd: str, bwd: str, inputs: Sequence[Node],
              mask: Optional[np.ndarray] = None) -> List[Node]:
    """Concatenated forward and backward hidden states at every position."""
    if len(inputs) == 0:
        raise ContractError("bidir_run needs a non-empty input sequence")
    f = run_lstm(tape, params, fwd, inputs, mask)
    b = run_lstm(tape, params, bwd, inputs, mask, reverse=True)
    return [tape.concat([hf, hb], axis=-1) for hf, hb in zip(f, b)]


def bidir_final(tape: Tape, params: Params, fwd: str, bwd: str, inputs: Sequence[Node],
                mask: np.ndarray) -> Node:
    """``[last forward state ; first backward state]`` of each right-padded row."""
    f = run_lstm(tape, params, fwd, inputs, mask)
    b = run_lstm(tape, params, bwd, inputs, mask, reverse=True)
    # masked steps carry the state forward, so position L-1 holds the last real state
    return tape.concat([f[-1], b[0]], axis=-1)


# critic -----------------------------------------------------------------

CRITIC_SLOPE = 0.01


def init_critic(params: Params, rng: np.random.Generator, n_in: int, n_hidden: int, prefix: str = "critic") -> None:
    init_linear(params, rng, f"{prefix}.l1", n_in, n_hidden)
    init_linear(params, rng, f"{prefix}.l2", n_hidden, n_hidden)
    init_linear(params, rng, f"{prefix}.out", n_hidden, 1)


def critic_forward(tape: Tape, params: Params, d_t: Node, c_t: Node, prefix: str = "critic",
                   slope: float = CRITIC_SLOPE) -> Node:
    """Value estimate of shape ``(B,)`` from decoder state and context.

    Both inputs are detached first, so nothing upstream of them can receive
    gradient from a critic loss.
    """
    x = tape.concat([tape.detach(d_t), tape.detach(c_t)], axis=-1)
    h = tape.leaky_relu(linear(tape, params, f"{prefix}.l1", x), slope)
    h = tape.leaky_relu(linear(tape, params, f"{prefix}.l2", h), slope)
    v = linear(tape, params, f"{prefix}.out", h)
    return tape.reshape(v, v.value.shape[:-1])


# pre-trained vectors ----------------------------------------------------------

def load_embeddings(path: str, token_to_id: Dict[str, int], table: np.ndarray) -> int:
    """Overwrite rows of ``table`` for tokens present in a text vector file.

    Each line is a token followed by ``table.shape[1]`` reals. Returns the
    number of rows replaced; rows for absent tokens are left untouched.
    """
    dim = table.shape[1]
    replaced = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            idx = token_to_id.get(parts[0])
            if idx is None:
                continue
            table[idx] = np.asarray(parts[1:], dtype=DTYPE)
            replaced += 1
    return replaced
