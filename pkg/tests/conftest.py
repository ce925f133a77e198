import numpy as np
import pytest

from seqlab.config import TrainConfig
from seqlab.data import Vocabs, synth_markov_task, synth_transliteration_task
from seqlab.model import SequenceModel

TINY = dict(word_dim=4, char_dim=3, char_units=2, output_dim=3, encoder_units=3, decoder_units=4,
            critic_units=3, dropout=0.0, batch_size=4, epochs=2, finetune_epochs=2, eval_beam=1,
            synth_train=12, synth_dev=4, synth_test=4, synth_max_len=5, synth_words=12, synth_tags=3)


def tiny_cfg(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="session")
def label_task():
    return synth_markov_task(n_tags=3, n_words=12, max_len=5, n_train=12, n_dev=4, n_test=4, seed=3)


@pytest.fixture(scope="session")
def label_vocabs(label_task):
    return Vocabs.build(label_task.train, "label", min_freq=1)


@pytest.fixture(scope="session")
def trans_data():
    return synth_transliteration_task(n_train=12, n_dev=4, n_test=4, max_len=4, seed=1)


@pytest.fixture(scope="session")
def trans_vocabs(trans_data):
    return Vocabs.build(trans_data[0], "transduce")


def make_model(vocabs, seed=0, max_len=0, **kw) -> SequenceModel:
    cfg = tiny_cfg(**kw)
    return SequenceModel(cfg, vocabs, max_len, rng=np.random.default_rng(seed))


def perturb(model: SequenceModel, seed: int = 0, scale: float = 0.5) -> SequenceModel:
    """Move zero-initialized parameters (CRF transitions, biases) off zero."""
    rng = np.random.default_rng(seed)
    for table in (model.params, model.critic):
        for k in table:
            table[k] = table[k] + rng.normal(0, scale, size=table[k].shape)
    return model


def grad_error(model, loss_fn, keys=None, eps=1e-6) -> float:
    """Worst relative error between backward() and central differences over ``keys``.

    ``loss_fn(tape)`` must return a scalar node and be deterministic.
    """
    from seqlab.autodiff import Tape, backward, numerical_grad
    tape = Tape()
    grads = backward(tape, loss_fn(tape))
    worst = 0.0
    tables = [model.params, model.critic]
    for k in keys or sorted(grads):
        table = next(t for t in tables if k in t)
        fd = numerical_grad(lambda: float(loss_fn(Tape(grad=False)).value), table[k], eps)
        scale = max(np.abs(fd).max(), np.abs(grads[k]).max(), 1e-3)
        worst = max(worst, float(np.abs(fd - grads[k]).max() / scale))
    return worst


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
