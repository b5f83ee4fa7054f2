"""Adversarial objective, gradient penalty and the stacked-state surrogate reward.

Expert samples are labelled 1 and policy samples 0.  Losses are computed
from logits through ``log_sigmoid`` so that a saturated discriminator never
produces ``log(0)``.  Demonstrations are frames only; nothing here ever
touches an action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, as_tensor, concat, grad, log_sigmoid, mean, no_grad, sqrt, tsum

DELTA = 1e-6
GP_EPS = 1e-16


@dataclass
class DiscBatch:
    policy_states: np.ndarray   # (N, k, H, W) uint8, post-action stacked states
    expert_states: np.ndarray   # (N, k, H, W) uint8

    def __post_init__(self):
        if len(self.policy_states) == 0 or len(self.expert_states) == 0:
            raise ValueError("discriminator batch is empty")
        if len(self.policy_states) != len(self.expert_states):
            raise ValueError(
                f"unequal mixture: {len(self.policy_states)} policy vs "
                f"{len(self.expert_states)} expert states"
            )


def gail_value_from_logits(policy_logits, expert_logits) -> Tensor:
    """``mean log(1 - D(policy)) + mean log D(expert)`` with ``D = sigmoid(logit)``."""
    lp, le = as_tensor(policy_logits), as_tensor(expert_logits)
    return mean(log_sigmoid(-lp)) + mean(log_sigmoid(le))


def gail_value(batch: DiscBatch, disc) -> Tensor:
    return gail_value_from_logits(disc.logit(batch.policy_states), disc.logit(batch.expert_states))


def input_gradient_norms(logit_fn: Callable[[Tensor], Tensor], x, create_graph: bool = True) -> Tensor:
    """Per-sample L2 norm of d logit / d x."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = logit_fn(xt)
    (g,) = grad(tsum(out), [xt], create_graph=create_graph)
    sq = tsum(g * g, axis=tuple(range(1, g.ndim)))
    return sqrt(sq + GP_EPS)


def interpolate(policy_x: np.ndarray, expert_x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``eps * expert + (1 - eps) * policy`` with one ``eps ~ U(0, 1)`` per pair."""
    policy_x = np.asarray(policy_x, dtype=np.float64)
    expert_x = np.asarray(expert_x, dtype=np.float64)
    eps = rng.uniform(size=(len(policy_x),) + (1,) * (policy_x.ndim - 1))
    return eps * expert_x + (1.0 - eps) * policy_x


def gradient_penalty(logit_fn: Callable[[Tensor], Tensor], policy_x, expert_x,
                     rng: np.random.Generator) -> Tensor:
    """One-centred penalty ``mean (||grad_x logit(x_hat)|| - 1)^2`` on interpolates.

    The result stays differentiable with respect to the parameters used by
    ``logit_fn`` (double backward).
    """
    x_hat = interpolate(policy_x, expert_x, rng)
    norms = input_gradient_norms(logit_fn, x_hat, create_graph=True)
    return mean((norms - 1.0) * (norms - 1.0))


def discriminator_loss(batch: DiscBatch, disc, nu: float, rng: np.random.Generator):
    """``-V + nu * GP``; returns ``(loss, stats)``.

    The penalty is taken with respect to the standardised input (pixels
    divided by 255), i.e. on the logit path the network actually sees.
    """
    if nu < 0:
        raise ValueError(f"gradient penalty weight must be >= 0, got {nu}")
    n = len(batch.policy_states)
    both = np.concatenate([batch.policy_states, batch.expert_states]).astype(np.float64)
    logits = disc.logit(both)
    lp, le = logits[:n], logits[n:]
    value = gail_value_from_logits(lp, le)
    loss = -value
    gp = None
    if nu > 0:
        gp = gradient_penalty(disc.logit_standardized, batch.policy_states / 255.0,
                              batch.expert_states / 255.0, rng)
        loss = loss + nu * gp
    acc = 0.5 * (float(np.mean(lp.data < 0)) + float(np.mean(le.data > 0)))
    stats = {
        "disc_loss": loss.item(),
        "gail_value": value.item(),
        "gp": gp.item() if gp is not None else 0.0,
        "disc_acc": acc,
    }
    return loss, stats


def reward_from_prob(d, delta: float = DELTA) -> np.ndarray:
    """``-log(1 - clamp(D, delta, 1 - delta))``."""
    d = np.clip(np.asarray(d, dtype=np.float64), delta, 1.0 - delta)
    return -np.log1p(-d)


def surrogate_reward(states: np.ndarray, disc, delta: float = DELTA, chunk: int = 128) -> np.ndarray:
    """Reward of post-action stacked states ``s_{t+1}^k`` under ``disc``."""
    out = []
    was_training = disc.training
    disc.eval()
    try:
        with no_grad():
            for i in range(0, len(states), chunk):
                out.append(disc(np.asarray(states[i:i + chunk], dtype=np.float64)).data)
    finally:
        disc.train(was_training)
    return reward_from_prob(np.concatenate(out), delta)


def discriminator_grads(batch: DiscBatch, disc, nu: float, rng: np.random.Generator):
    """Loss gradients for every discriminator parameter, plus stats.

    Raises ``FloatingPointError`` naming the first parameter whose gradient is
    not finite.
    """
    disc.train()
    loss, stats = discriminator_loss(batch, disc, nu, rng)
    params = disc.parameters()
    grads = grad(loss, list(params.values()))
    out = {}
    for (name, _), g in zip(params.items(), grads):
        if not np.all(np.isfinite(g.data)):
            raise FloatingPointError(f"non-finite discriminator gradient in {name}")
        out[name] = np.array(g.data)
    return out, stats


def update_discriminator(batch: DiscBatch, disc, optimizer, nu: float, rng: np.random.Generator):
    """One Adam step on the regularised cross-entropy; returns the stats."""
    grads, stats = discriminator_grads(batch, disc, nu, rng)
    optimizer.step(grads)
    return stats
