"""Rollout buffer, generalized advantage estimation and clipped-surrogate PPO."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .networks import PolicyNet, ValueNet, gaussian_entropy, gaussian_log_prob
from .tensor import Tensor, as_tensor, clip, exp, grad, mean, minimum, no_grad


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    policy_lr: float = 3e-4
    value_lr: float = 3e-4
    normalize_advantages: bool = True


@dataclass
class RunningMoments:
    """Running mean and variance of value targets, merged batch by batch.

    The value network regresses standardized targets; ``denormalize`` maps
    its outputs back to return units before advantages are computed.
    """

    mean: float = 0.0
    var: float = 1.0
    count: float = 0.0
    eps: float = 1e-8

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size == 0:
            return
        n, m, v = float(x.size), float(x.mean()), float(x.var())
        if self.count == 0:
            self.mean, self.var, self.count = m, v, n
            return
        total = self.count + n
        delta = m - self.mean
        self.mean += delta * n / total
        self.var = (self.var * self.count + v * n + delta * delta * self.count * n / total) / total
        self.count = total

    @property
    def std(self) -> float:
        return float(np.sqrt(self.var + self.eps))

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


@dataclass
class RolloutBuffer:
    """Transitions of one collection phase, laid out env-major.

    ``dones`` marks absorbing transitions (no bootstrap); ``ends`` marks the
    last transition of a contiguous stream, whether absorbing, cut by the
    time limit or cut by the end of collection.  Rewards are surrogate
    rewards only.
    """

    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    next_obs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    ends: list = field(default_factory=list)
    values: list = field(default_factory=list)
    next_values: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.obs)

    def add(self, obs, action, log_prob, next_obs, done, end, reward=0.0, value=0.0, next_value=0.0):
        self.obs.append(obs)
        self.actions.append(action)
        self.log_probs.append(float(log_prob))
        self.next_obs.append(next_obs)
        self.dones.append(bool(done))
        self.ends.append(bool(end))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.next_values.append(float(next_value))

    def flush(self) -> None:
        for f in self.__dataclass_fields__:
            getattr(self, f).clear()

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "obs": np.stack(self.obs),
            "actions": np.stack(self.actions),
            "log_probs": np.asarray(self.log_probs),
            "next_obs": np.stack(self.next_obs),
            "rewards": np.asarray(self.rewards),
            "dones": np.asarray(self.dones),
            "ends": np.asarray(self.ends),
            "values": np.asarray(self.values),
            "next_values": np.asarray(self.next_values),
        }


def compute_advantages(rewards, values, next_values, dones, ends, gamma: float, lam: float):
    """GAE over env-major streams; returns ``(advantages, return_targets)``.

    ``next_values[t]`` is the old value of the successor state and is ignored
    where ``dones[t]`` (discount zeroed at absorbing states).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("cannot compute advantages of an empty buffer")
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    ends = np.asarray(ends, dtype=bool)
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if ends[t]:
            running = 0.0
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * nonterminal * next_values[t] - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def ppo_policy_loss(log_prob_new, log_prob_old, advantage, clip_eps: float) -> Tensor:
    """``-mean(min(rho * A, clip(rho, 1 - eps, 1 + eps) * A))``."""
    lp_new = as_tensor(log_prob_new)
    ratio = exp(lp_new - Tensor(np.asarray(log_prob_old, dtype=np.float64)))
    adv = Tensor(np.asarray(advantage, dtype=np.float64))
    unclipped = ratio * adv
    clipped = clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return -mean(minimum(unclipped, clipped))


def value_loss(v_new, targets) -> Tensor:
    diff = as_tensor(v_new) - Tensor(np.asarray(targets, dtype=np.float64))
    return mean(diff * diff)


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def _collect(params: dict, loss: Tensor, what: str) -> dict[str, np.ndarray]:
    grads = grad(loss, list(params.values()))
    out = {}
    for (name, _), g in zip(params.items(), grads):
        if not np.all(np.isfinite(g.data)):
            raise FloatingPointError(f"non-finite {what} gradient in {name}")
        out[name] = np.array(g.data)
    return out


def ppo_grads(policy: PolicyNet, value: ValueNet, mb: Minibatch, cfg: PPOConfig):
    """Gradients of the policy objective (with entropy bonus) and of the value loss."""
    adv = normalize(mb.advantages) if cfg.normalize_advantages else mb.advantages
    obs = mb.obs.astype(np.float64)
    out = policy(obs)
    logp = gaussian_log_prob(out.mean, out.log_std, mb.actions)
    pol_loss = ppo_policy_loss(logp, mb.log_probs, adv, cfg.clip_eps)
    entropy = gaussian_entropy(out.log_std)
    total = pol_loss - cfg.entropy_coef * entropy
    pgrads = _collect(policy.parameters(), total, "policy")

    v = value(obs)
    vloss = value_loss(v, mb.returns)
    vgrads = _collect(value.parameters(), cfg.value_coef * vloss, "value")

    ratio = np.exp(logp.data - mb.log_probs)
    stats = {
        "policy_loss": pol_loss.item(),
        "value_loss": vloss.item(),
        "entropy": entropy.item(),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    return pgrads, vgrads, stats


def update_policy_value(policy: PolicyNet, value: ValueNet, mb: Minibatch, policy_opt, value_opt,
                        cfg: PPOConfig):
    """One Adam step each for the policy and value networks."""
    pgrads, vgrads, stats = ppo_grads(policy, value, mb, cfg)
    policy_opt.step(pgrads)
    value_opt.step(vgrads)
    return stats


def act(policy: PolicyNet, obs: np.ndarray, rng: np.random.Generator, deterministic: bool = False):
    """Sample actions for a batch of stacked states; returns ``(actions, log_probs)``."""
    with no_grad():
        out = policy(np.asarray(obs, dtype=np.float64))
    mu, log_std = out.mean.data, out.log_std.data
    if deterministic:
        a = mu.copy()
    else:
        a = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    with no_grad():
        logp = gaussian_log_prob(Tensor(mu), Tensor(log_std), a).data
    return a, logp


def values_of(value: ValueNet, obs: np.ndarray, chunk: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(obs), chunk):
            out.append(value(np.asarray(obs[i:i + chunk], dtype=np.float64)).data)
    return np.concatenate(out) if out else np.zeros(0)


def quadratic_bandit(updates: int = 500, batch: int = 64, mu0: float = 1.0, log_std0: float = 0.0,
                     lr: float = 0.02, seed: int = 0, cfg: PPOConfig | None = None) -> np.ndarray:
    """PPO on the one-step bandit with reward ``-a**2``; returns the mean after each update.

    Each update draws a fresh batch from the current policy, uses the batch
    mean reward as baseline and takes one Adam step on the clipped loss
    plus entropy bonus.  The optimum is ``mu = 0``.
    """
    from .optim import Adam

    cfg = cfg or PPOConfig()
    rng = np.random.default_rng(seed)
    mu = Tensor(np.array([mu0]), requires_grad=True, name="mu")
    log_std = Tensor(np.array([log_std0]), requires_grad=True, name="log_std")
    opt = Adam({"mu": mu, "log_std": log_std}, lr=lr, max_grad_norm=cfg.max_grad_norm)
    trace = np.zeros(updates)
    for i in range(updates):
        std = float(np.exp(log_std.data[0]))
        a = mu.data[0] + std * rng.standard_normal((batch, 1))
        old = gaussian_log_prob(Tensor(mu.data), Tensor(log_std.data), a).data
        reward = -a[:, 0] ** 2
        adv = normalize(reward - reward.mean())
        lp = gaussian_log_prob(mu, clip(log_std, -5.0, 2.0), a)
        loss = ppo_policy_loss(lp, old, adv, cfg.clip_eps) - cfg.entropy_coef * gaussian_entropy(log_std)
        g_mu, g_ls = grad(loss, [mu, log_std])
        opt.step({"mu": g_mu.data, "log_std": g_ls.data})
        trace[i] = mu.data[0]
    return trace
