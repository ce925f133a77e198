"""Objectives and update rules.

Maximum likelihood (teacher forcing) and scheduled sampling are minimized
with Adam. The policy-gradient objectives (adjusted actor-critic, standard
actor-critic, actor-critic + ml, REINFORCE with and without baseline,
self-critical) fine-tune the actor by fixed-step gradient ascent, while the
critic regresses onto TD returns with its own Adam optimizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Node, Tape, backward, clip_global_norm
from .config import TrainConfig
from .data import EOS, PAD, LabeledExample
from .layers import Params, critic_forward
from .model import (SequenceModel, Trace, greedy_policy, sampling_policy, scheduled_policy,
                    teacher_policy)


class DivergenceError(FloatingPointError):
    pass


# optimizers ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Params, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; ``grads`` are of a loss to minimize."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def ascent_step(params: Params, grads: Dict[str, np.ndarray], alpha: float,
                max_norm: Optional[float] = None) -> None:
    """``theta += alpha * grad J`` after optional global-norm clipping.

    Parameters whose gradient is identically zero are not touched at all.
    """
    if max_norm is not None:
        grads = clip_global_norm(grads, max_norm)
    for name, g in grads.items():
        if alpha != 0.0 and np.any(g):
            params[name] += alpha * g


@dataclass
class Optimizers:
    actor: AdamState = field(default_factory=AdamState)
    critic: AdamState = field(default_factory=AdamState)
    baseline: float = 0.0          # running mean return for the constant baseline
    baseline_count: int = 0


def _actor_adam(model: SequenceModel, grads, opt: Optimizers, lr: float) -> None:
    c = model.cfg
    grads = clip_global_norm(grads, c.max_gradient_norm)
    adam_step(model.params, grads, opt.actor, lr, c.adam_beta1, c.adam_beta2, c.adam_eps)


def _critic_adam(model: SequenceModel, grads, opt: Optimizers) -> None:
    c = model.cfg
    grads = clip_global_norm(grads, c.max_gradient_norm)
    adam_step(model.critic, grads, opt.critic, c.critic_lr, c.critic_beta1, c.critic_beta2, c.critic_eps)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value})")


# schedule ------------------------------------------------------------------------

def inverse_sigmoid(epoch: float, k: float) -> float:
    """Probability of feeding the gold token: ``k / (k + exp(epoch / k))``."""
    if k <= 0:
        raise ValueError("k must be positive")
    return k / (k + math.exp(epoch / k))


# returns and advantages ------------------------------------------------------------

def td_returns(rewards: Sequence[float], values: Sequence[float], n: int) -> np.ndarray:
    """n-step TD returns ``G_t = r_t + ... + r_{t+n-1} + V(t+n)`` for one episode.

    Reward sums are cut at the end of the episode and ``V`` past the last
    step is zero.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    l = len(r)
    out = np.empty(l)
    for t in range(l):
        out[t] = r[t:t + n].sum() + (v[t + n] if t + n < l else 0.0)
    return out


def batch_td_returns(rewards: np.ndarray, values: np.ndarray, mask: np.ndarray, n: int) -> np.ndarray:
    """:func:`td_returns` row by row for right-padded ``(B, L)`` arrays."""
    out = np.zeros_like(rewards)
    for b in range(rewards.shape[0]):
        l = int(mask[b].sum())
        out[b, :l] = td_returns(rewards[b, :l], values[b, :l], n)
    return out


def adjust(gold: int, predicted: int, delta: float) -> int:
    """0 when the advantage's sign contradicts the correctness of the prediction, else 1."""
    if predicted == gold and delta < 0:
        return 0
    if predicted != gold and delta > 0:
        return 0
    return 1


def adjusted_advantages(gold: np.ndarray, predicted: np.ndarray, delta: np.ndarray) -> np.ndarray:
    correct = predicted == gold
    keep = ~((correct & (delta < 0)) | (~correct & (delta > 0)))
    return np.where(keep, delta, 0.0)


@dataclass
class Rollout:
    """Arrays are ``(B, L)``, zero beyond each episode's end."""

    predictions: np.ndarray
    gold: np.ndarray
    mask: np.ndarray
    rewards: np.ndarray
    values: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    adjusted: Optional[np.ndarray] = None
    trace: Optional[Trace] = None

    @property
    def logp(self) -> List[Node]:
        return self.trace.logp_scored


def aligned_gold(model: SequenceModel, batch: Sequence[LabeledExample], steps: int) -> np.ndarray:
    """Gold ids per decoder step; transduction appends EOS and then PAD."""
    if not model.transduce:
        gold = np.zeros((len(batch), steps), dtype=np.int64)
        for i, ex in enumerate(batch):
            gold[i, :ex.length] = ex.tags[:steps]
        return gold
    pad = model.vocabs.targets.id(PAD)
    eos = model.vocabs.targets.id(EOS)
    gold = np.full((len(batch), steps), pad, dtype=np.int64)
    for i, ex in enumerate(batch):
        seq = np.append(ex.tags, eos)[:steps]
        gold[i, :len(seq)] = seq
    return gold


def _rollout(model: SequenceModel, tape: Tape, batch: Sequence[LabeledExample], policy,
             rng: Optional[np.random.Generator]) -> Rollout:
    enc = model.encode(tape, batch, rng)
    trace = model.unroll(tape, enc, policy)
    pred = trace.predictions()
    mask = trace.step_mask()
    gold = aligned_gold(model, batch, pred.shape[1])
    rewards = (pred == gold).astype(np.float64) * mask
    return Rollout(pred, gold, mask, rewards, trace=trace)


def greedy_rollout(model: SequenceModel, tape: Tape, batch: Sequence[LabeledExample],
                   rng: Optional[np.random.Generator] = None) -> Rollout:
    """Decode greedily, feeding back the argmax; rewards are 1 where the output matches gold."""
    return _rollout(model, tape, batch, greedy_policy, rng)


def sample_rollout(model: SequenceModel, tape: Tape, batch: Sequence[LabeledExample],
                   sample_rng: np.random.Generator, rng: Optional[np.random.Generator] = None) -> Rollout:
    return _rollout(model, tape, batch, sampling_policy(sample_rng), rng)


def critic_values(model: SequenceModel, tape: Tape, trace: Trace) -> List[Node]:
    """``V(t)`` for every step, on a tape that sees the actor's states only as constants."""
    slope = model.cfg.critic_slope
    return [critic_forward(tape, model.critic, tape.constant(d.value), tape.constant(c.value), slope=slope)
            for d, c in zip(trace.states, trace.contexts)]


def critic_loss(tape: Tape, values: List[Node], returns: np.ndarray, mask: np.ndarray) -> Node:
    """Batch mean of ``sum_t (G_t - V(t))^2`` with ``G`` held constant (semi-gradient)."""
    B = mask.shape[0]
    total = None
    for t, v in enumerate(values):
        diff = tape.constant(returns[:, t]) - v
        term = tape.sum(diff * diff * mask[:, t])
        total = term if total is None else total + term
    return total * (1.0 / B)


def critic_semi_gradient(model: SequenceModel, trace: Trace, returns: np.ndarray,
                         mask: np.ndarray) -> Dict[str, np.ndarray]:
    tape = Tape()
    values = critic_values(model, tape, trace)
    return backward(tape, critic_loss(tape, values, returns, mask))


def policy_loss(tape: Tape, logps: Sequence[Node], coef: np.ndarray, mask: np.ndarray) -> Node:
    """``-(1/B) sum_b sum_t coef[b, t] log p(y_hat_t)``."""
    B = mask.shape[0]
    total = None
    for t, lp in enumerate(logps):
        term = tape.sum(lp * (coef[:, t] * mask[:, t]))
        total = term if total is None else total + term
    return total * (-1.0 / B)


# maximum likelihood ---------------------------------------------------------------

def ml_loss(model: SequenceModel, tape: Tape, batch: Sequence[LabeledExample],
            rng: Optional[np.random.Generator] = None) -> Node:
    """Negative log-likelihood, summed over positions and averaged over the batch."""
    ll = model.log_likelihood(tape, batch, rng)
    return tape.sum(ll) * (-1.0 / len(batch))


def ml_train_step(model: SequenceModel, batch, opt: Optimizers, rng) -> Dict[str, float]:
    tape = Tape()
    loss = ml_loss(model, tape, batch, rng)
    _check_finite(float(loss.value), "ml loss")
    _actor_adam(model, backward(tape, loss), opt, model.cfg.ml_lr)
    return {"loss": float(loss.value)}


def scheduled_sampling_loss(model: SequenceModel, tape: Tape, batch: Sequence[LabeledExample],
                            epsilon: float, sample_rng: np.random.Generator,
                            rng: Optional[np.random.Generator] = None) -> Node:
    """Gold-scored likelihood where each fed token is gold with probability ``epsilon``."""
    enc = model.encode(tape, batch, rng)
    gold, mask = model.gold_matrix(batch)
    trace = model.unroll(tape, enc, scheduled_policy(sample_rng, epsilon), gold, mask)
    return tape.sum(model.sequence_logp(tape, trace)) * (-1.0 / len(batch))


def scheduled_sampling_step(model: SequenceModel, batch, opt: Optimizers, epoch: int,
                            rng: np.random.Generator) -> Dict[str, float]:
    eps = inverse_sigmoid(epoch, model.cfg.ss_k)
    tape = Tape()
    loss = scheduled_sampling_loss(model, tape, batch, eps, rng, rng)
    _check_finite(float(loss.value), "scheduled sampling loss")
    _actor_adam(model, backward(tape, loss), opt, model.cfg.ml_lr)
    return {"loss": float(loss.value), "epsilon": eps}


# policy gradient ---------------------------------------------------------------------

def _dropout_rng(cfg: TrainConfig, rng):
    """Dropout source for policy rollouts; None decodes as at test time."""
    return rng if cfg.rollout_dropout else None


def _actor_update(model: SequenceModel, tape: Tape, loss: Node, opt: Optimizers, step: float) -> None:
    grads = backward(tape, loss)
    c = model.cfg
    if c.rl_optimizer == "adam":
        _actor_adam(model, grads, opt, c.ml_lr)
    else:
        # descent on the loss is ascent on the objective
        ascent_step(model.params, {k: -g for k, g in grads.items()}, step, c.max_gradient_norm)


def ac_rollout(model: SequenceModel, tape: Tape, ctape: Tape, batch: Sequence[LabeledExample],
               rng: Optional[np.random.Generator] = None,
               variant: str = "adjusted") -> Tuple[Rollout, List[Node]]:
    """Greedy rollout with critic values, TD returns and (possibly gated) advantages.

    The actor graph lives on ``tape``, the critic graph on ``ctape``.
    """
    cfg = model.cfg
    ro = greedy_rollout(model, tape, batch, _dropout_rng(cfg, rng))
    v_nodes = critic_values(model, ctape, ro.trace)
    ro.values = np.stack([v.value for v in v_nodes], axis=1) * ro.mask
    ro.returns = batch_td_returns(ro.rewards, ro.values, ro.mask, cfg.n_steps)
    ro.advantages = (ro.returns - ro.values) * ro.mask
    if variant == "adjusted":
        ro.adjusted = adjusted_advantages(ro.gold, ro.predictions, ro.advantages) * ro.mask
    else:
        ro.adjusted = ro.advantages
    return ro, v_nodes


def ac_train_step(model: SequenceModel, batch: Sequence[LabeledExample], opt: Optimizers,
                  rng: Optional[np.random.Generator] = None, variant: str = "adjusted") -> Dict[str, float]:
    """One actor-critic update on a batch.

    ``variant`` is ``adjusted`` (advantages gated by :func:`adjust`),
    ``standard`` (raw advantages) or ``ml`` (raw advantages plus the
    teacher-forced likelihood from a second decoder pass).
    """
    cfg = model.cfg
    tape, ctape = Tape(), Tape()
    ro, v_nodes = ac_rollout(model, tape, ctape, batch, rng, variant)
    loss = policy_loss(tape, ro.logp, ro.adjusted, ro.mask)
    if variant == "ml":
        enc = model.encode(tape, batch, rng)
        gold, gmask = model.gold_matrix(batch)
        tf = model.unroll(tape, enc, teacher_policy, gold, gmask)
        loss = loss + tape.sum(model.sequence_logp(tape, tf)) * (-1.0 / len(batch))
    _check_finite(float(loss.value), "actor loss")
    _actor_update(model, tape, loss, opt, cfg.rl_step)

    closs = critic_loss(ctape, v_nodes, ro.returns, ro.mask)
    _check_finite(float(closs.value), "critic loss")
    _critic_adam(model, backward(ctape, closs), opt)
    return {"loss": float(loss.value), "critic_loss": float(closs.value),
            "reward": float(ro.rewards.sum() / max(ro.mask.sum(), 1.0))}


def monte_carlo_returns(rewards: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Reward-to-go ``sum_{i >= t} r_i`` (TD returns with n equal to the length)."""
    return np.cumsum((rewards * mask)[:, ::-1], axis=1)[:, ::-1] * mask


def reinforce_loss(model: SequenceModel, tape: Tape, rollout: Rollout,
                   baseline: Optional[np.ndarray] = None) -> Node:
    """``-(1/B) sum (G_t - b_t) log p(y_hat_t)`` with Monte-Carlo returns ``G``."""
    if rollout.returns is None:
        rollout.returns = monte_carlo_returns(rollout.rewards, rollout.mask)
    coef = rollout.returns - (0.0 if baseline is None else baseline)
    return policy_loss(tape, rollout.logp, coef, rollout.mask)


def reinforce_step(model: SequenceModel, batch: Sequence[LabeledExample], opt: Optimizers,
                   rng: np.random.Generator, with_baseline: bool = False) -> Dict[str, float]:
    cfg = model.cfg
    tape = Tape()
    ro = sample_rollout(model, tape, batch, rng, _dropout_rng(cfg, rng))
    ro.returns = monte_carlo_returns(ro.rewards, ro.mask)
    info = {}
    baseline = None
    if with_baseline and cfg.baseline == "critic":
        ctape = Tape()
        v_nodes = critic_values(model, ctape, ro.trace)
        baseline = np.stack([v.value for v in v_nodes], axis=1) * ro.mask
        closs = critic_loss(ctape, v_nodes, ro.returns, ro.mask)
        _critic_adam(model, backward(ctape, closs), opt)
        info["critic_loss"] = float(closs.value)
    elif with_baseline:
        baseline = np.full_like(ro.returns, opt.baseline) * ro.mask
        n = ro.mask.sum()
        if n:
            total = opt.baseline * opt.baseline_count + float(ro.returns.sum())
            opt.baseline_count += int(n)
            opt.baseline = total / opt.baseline_count
    loss = reinforce_loss(model, tape, ro, baseline)
    _check_finite(float(loss.value), "reinforce loss")
    _actor_update(model, tape, loss, opt, cfg.reinforce_step)
    info.update(loss=float(loss.value), reward=float(ro.rewards.sum() / max(ro.mask.sum(), 1.0)))
    return info


def self_critical_loss(tape: Tape, sampled: Rollout, greedy: Rollout) -> Node:
    """``-(1/B) sum_b (R_sample - R_greedy) sum_t log p(sampled y_hat_t)``."""
    advantage = sampled.rewards.sum(axis=1) - greedy.rewards.sum(axis=1)
    coef = np.repeat(advantage[:, None], sampled.mask.shape[1], axis=1)
    return policy_loss(tape, sampled.logp, coef, sampled.mask)


def self_critical_step(model: SequenceModel, batch: Sequence[LabeledExample], opt: Optimizers,
                       rng: np.random.Generator) -> Dict[str, float]:
    tape = Tape()
    sampled = sample_rollout(model, tape, batch, rng, _dropout_rng(model.cfg, rng))
    greedy = greedy_rollout(model, Tape(grad=False), batch)
    loss = self_critical_loss(tape, sampled, greedy)
    _check_finite(float(loss.value), "self-critical loss")
    _actor_update(model, tape, loss, opt, model.cfg.reinforce_step)
    return {"loss": float(loss.value),
            "reward": float(sampled.rewards.sum() / max(sampled.mask.sum(), 1.0))}


def train_step(model: SequenceModel, batch: Sequence[LabeledExample], opt: Optimizers,
               rng: np.random.Generator, objective: str, epoch: int = 0) -> Dict[str, float]:
    if objective == "ml":
        return ml_train_step(model, batch, opt, rng)
    if objective == "ac":
        return ac_train_step(model, batch, opt, rng, "adjusted")
    if objective == "ac-standard":
        return ac_train_step(model, batch, opt, rng, "standard")
    if objective == "ac+ml":
        return ac_train_step(model, batch, opt, rng, "ml")
    if objective == "reinforce":
        return reinforce_step(model, batch, opt, rng, with_baseline=False)
    if objective == "reinforce-baseline":
        return reinforce_step(model, batch, opt, rng, with_baseline=True)
    if objective == "self-critical":
        return self_critical_step(model, batch, opt, rng)
    if objective == "scheduled-sampling":
        return scheduled_sampling_step(model, batch, opt, epoch, rng)
    raise ValueError(f"unknown objective {objective!r}")
