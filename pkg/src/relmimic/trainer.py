"""The outer imitation loop: collect, score with the discriminator, update, repeat.

Every learner owns its own environments and its own copy of the three
networks.  All copies start from the same initialisation and every update
applies the learner-averaged gradient, so the copies stay bit-identical;
learners differ only in the random streams that drive their environments,
action noise and minibatch draws.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import time
import typing
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import (
    ENV_ID,
    HORIZON,
    DemonstrationSet,
    FrameStacker,
    VecEnv,
    env_reset,
    env_step,
    load_demos,
    record_demos,
    render,
    save_demos,
)
from .gail import DiscBatch, discriminator_grads, surrogate_reward
from .metrics import emit_report, write_csv
from .networks import (
    AgentConfig,
    DiscConfig,
    Discriminator,
    PolicyNet,
    ValueNet,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)
from .optim import Adam, average_gradients
from .ppo import (Minibatch, PPOConfig, RolloutBuffer, RunningMoments, act, compute_advantages,
                  ppo_grads, values_of)

# which networks carry relational blocks: (reward, policy, value)
VARIANTS = {
    "local": (False, False, False),
    "non-local-reward": (True, False, False),
    "non-local-value": (True, False, True),
    "non-local-all": (True, True, True),
}

EVAL_SEED = 1_000_000
RECENT = 20          # finished training episodes averaged in the log


@dataclass
class TrainConfig:
    variant: str = "local"
    k: int = 4
    resolution: int = 32
    colors: int = 1
    agent_channels: tuple[int, ...] = (16, 8, 4)
    disc_channels: tuple[int, ...] = (16, 32, 32, 32, 32)
    hidden: int = 256
    env_id: str = ENV_ID
    horizon: int = HORIZON
    # outer and inner loop bounds
    i_max: int = 300
    c_max: int = 1024
    t_max: int = 4
    d_max: int = 1
    g_max: int = 4
    minibatch: int = 64
    disc_batch: int = 64
    n_envs: int = 8
    n_learners: int = 4
    seeds: tuple[int, ...] = tuple(range(10))
    # discriminator
    nu: float = 10.0
    disc_lr: float = 1e-3
    disc_max_grad_norm: float = 0.0
    # PPO
    policy_lr: float = 3e-4
    value_lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    init_log_std: float = 0.0
    value_norm: bool = True
    # demonstrations
    demo_path: str = ""
    n_demos: int = 8
    demo_seed: int = 500_000
    # evaluation and bookkeeping
    eval_every: int = 25
    eval_episodes: int = 10
    check_sync: bool = True
    save_checkpoints: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.agent_channels = tuple(int(c) for c in self.agent_channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        for name in ("i_max", "c_max", "t_max", "g_max", "minibatch", "disc_batch", "n_envs",
                     "n_learners", "k", "resolution", "horizon", "n_demos", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_max < 0:
            raise ValueError(f"d_max must be >= 0, got {self.d_max}")
        if self.c_max % self.n_envs:
            raise ValueError(f"c_max ({self.c_max}) must be a multiple of n_envs ({self.n_envs})")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.nu < 0:
            raise ValueError(f"nu must be >= 0, got {self.nu}")

    def agent_config(self, relational: bool) -> AgentConfig:
        return AgentConfig(k=self.k, colors=self.colors, resolution=self.resolution,
                           variant="non_local" if relational else "local",
                           channels=self.agent_channels, hidden=self.hidden)

    def disc_config(self) -> DiscConfig:
        return DiscConfig(k=self.k, colors=self.colors, resolution=self.resolution,
                          relational=VARIANTS[self.variant][0], channels=self.disc_channels,
                          hidden=self.hidden)

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(gamma=self.gamma, lam=self.lam, clip_eps=self.clip_eps,
                         entropy_coef=self.entropy_coef, value_coef=self.value_coef,
                         max_grad_norm=self.max_grad_norm, policy_lr=self.policy_lr,
                         value_lr=self.value_lr)


# ------------------------------------------------------------ config files

def _field_types() -> dict[str, typing.Any]:
    return typing.get_type_hints(TrainConfig)


def _parse_value(name: str, text: str, tp):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ValueError(f"invalid value for {name}: {text!r}") from None
    raise TypeError(f"unsupported config type for {name}: {tp}")


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_overrides(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``name -> text`` overrides to ``base`` (defaults if omitted)."""
    types = _field_types()
    values = dataclasses.asdict(base) if base is not None else {}
    for name, text in pairs.items():
        if name not in types:
            raise KeyError(f"unknown config key {name!r}")
        values[name] = _parse_value(name, text, types[name])
    return TrainConfig(**values)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs, base)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = ["# resolved training configuration"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ learners

@dataclass
class CollectStats:
    surrogate_returns: list = field(default_factory=list)
    progress: list = field(default_factory=list)
    mean_reward: float = 0.0


class Learner:
    """One worker: environments, network replicas, optimisers and a buffer."""

    def __init__(self, cfg: TrainConfig, seed: int, index: int, expert_states: np.ndarray,
                 moments: RunningMoments | None = None):
        self.cfg = cfg
        # value-target statistics; shared by all learners of a seed
        self.moments = moments if moments is not None else RunningMoments()
        self.index = index
        rel_reward, rel_policy, rel_value = VARIANTS[cfg.variant]
        # same initialisation in every learner
        self.policy = PolicyNet(cfg.agent_config(rel_policy), seed=seed * 10 + 1,
                                init_log_std=cfg.init_log_std)
        self.value = ValueNet(cfg.agent_config(rel_value), seed=seed * 10 + 2)
        self.disc = Discriminator(cfg.disc_config(), seed=seed * 10 + 3)
        self.policy_opt = Adam(self.policy.parameters(), cfg.policy_lr, max_grad_norm=cfg.max_grad_norm)
        self.value_opt = Adam(self.value.parameters(), cfg.value_lr, max_grad_norm=cfg.max_grad_norm)
        self.disc_opt = Adam(self.disc.parameters(), cfg.disc_lr, betas=(0.5, 0.999),
                             max_grad_norm=cfg.disc_max_grad_norm or None)
        # learner-specific streams
        self.rng = np.random.default_rng([seed, index])
        self.envs = VecEnv(cfg.n_envs, cfg.k, cfg.resolution,
                           base_seed=(seed * 1000 + index) * 100_000, horizon=cfg.horizon)
        self.expert_states = expert_states
        self.buffer = RolloutBuffer()
        self.running_return = np.zeros(cfg.n_envs)
        self.data: dict[str, np.ndarray] = {}

    # -- collection ---------------------------------------------------------

    def collect(self) -> CollectStats:
        """Fill the buffer with ``c_max`` transitions scored by the current reward."""
        cfg = self.cfg
        self.buffer.flush()
        steps = cfg.c_max // cfg.n_envs
        obs_l, act_l, logp_l, next_l, done_l, trunc_l = [], [], [], [], [], []
        stats = CollectStats()
        for _ in range(steps):
            obs = self.envs.observe()
            a, logp = act(self.policy, obs, self.rng)
            next_obs, dones, truncs, scores = self.envs.step(np.clip(a, -1.0, 1.0))
            obs_l.append(obs)
            act_l.append(a)
            logp_l.append(logp)
            next_l.append(next_obs)
            done_l.append(dones)
            trunc_l.append(truncs)
            stats.progress += scores
        # time-major (steps, n_envs, ...) -> env-major flat
        def flat(x):
            x = np.stack(x)
            return np.swapaxes(x, 0, 1).reshape((-1,) + x.shape[2:])

        obs, actions, logps = flat(obs_l), flat(act_l), flat(logp_l)
        next_obs, dones, truncs = flat(next_l), flat(done_l), flat(trunc_l)
        ends = dones | truncs
        ends_stream = ends.copy()
        ends_stream[steps - 1::steps] = True          # end of collection cuts each stream

        rewards = surrogate_reward(next_obs, self.disc)
        values = self._values(obs)
        next_values = np.zeros_like(values)
        inner = ~ends_stream
        next_values[inner] = values[np.flatnonzero(inner) + 1]
        boot = ends_stream & ~dones
        if boot.any():
            next_values[boot] = self._values(next_obs[boot])

        for e in range(cfg.n_envs):
            for t in range(steps):
                j = e * steps + t
                self.running_return[e] += rewards[j]
                if ends[j]:
                    stats.surrogate_returns.append(float(self.running_return[e]))
                    self.running_return[e] = 0.0

        for j in range(len(obs)):
            self.buffer.add(obs[j], actions[j], logps[j], next_obs[j], dones[j], ends_stream[j],
                            rewards[j], values[j], next_values[j])
        adv, targets = compute_advantages(rewards, values, next_values, dones, ends_stream,
                                          cfg.gamma, cfg.lam)
        self.data = {"obs": obs, "actions": actions, "log_probs": logps, "next_obs": next_obs,
                     "advantages": adv, "returns": targets}
        stats.mean_reward = float(rewards.mean())
        return stats

    def _values(self, obs: np.ndarray) -> np.ndarray:
        v = values_of(self.value, obs)
        return self.moments.denormalize(v) if self.cfg.value_norm else v

    # -- gradients ------------------------------------------------------------

    def disc_gradients(self):
        cfg = self.cfg
        n = len(self.data["next_obs"])
        pol = self.data["next_obs"][self.rng.integers(0, n, cfg.disc_batch)]
        exp = self.expert_states[self.rng.integers(0, len(self.expert_states), cfg.disc_batch)]
        return discriminator_grads(DiscBatch(pol, exp), self.disc, cfg.nu, self.rng)

    def ppo_gradients(self, ppo_cfg: PPOConfig):
        n = len(self.data["obs"])
        idx = self.rng.choice(n, size=min(self.cfg.minibatch, n), replace=False)
        targets = self.data["returns"][idx]
        if self.cfg.value_norm:
            targets = self.moments.normalize(targets)
        mb = Minibatch(self.data["obs"][idx], self.data["actions"][idx], self.data["log_probs"][idx],
                       self.data["advantages"][idx], targets)
        return ppo_grads(self.policy, self.value, mb, ppo_cfg)


def check_synchrony(learners: list[Learner]) -> None:
    """Raise if any learner's parameters differ from learner 0's."""
    ref = learners[0]
    for other in learners[1:]:
        for net in ("policy", "value", "disc"):
            a = getattr(ref, net).state_dict()
            b = getattr(other, net).state_dict()
            for k in a:
                if not np.array_equal(a[k], b[k]):
                    raise RuntimeError(f"learner {other.index} desynchronised in {net}.{k}")
        for (name, _, sa), (_, _, sb) in zip(ref.disc.spectral_layers(), other.disc.spectral_layers()):
            if not np.array_equal(sa.u, sb.u):
                raise RuntimeError(f"learner {other.index} desynchronised in spectral state of {name}")


# ------------------------------------------------------------ evaluation

def evaluate(policy: PolicyNet, k: int, resolution: int, episodes: int = 10,
             horizon: int = HORIZON, seed0: int = EVAL_SEED) -> list[float]:
    """Progress scores of ``episodes`` mean-action rollouts at fixed seeds."""
    states = [env_reset(seed0 + i) for i in range(episodes)]
    start = [s.x for s in states]
    stackers = [FrameStacker(k) for _ in range(episodes)]
    for st, s in zip(stackers, states):
        st.reset(render(s, resolution))
    alive = list(range(episodes))
    rng = np.random.default_rng(0)
    while alive:
        obs = np.stack([stackers[i].state() for i in alive])
        a, _ = act(policy, obs, rng, deterministic=True)
        still = []
        for j, i in enumerate(alive):
            s, done = env_step(states[i], np.clip(a[j], -1.0, 1.0))
            states[i] = s
            stackers[i].push(render(s, resolution))
            if not done and s.t < horizon:
                still.append(i)
        alive = still
    return [max(0.0, s.x - x0) for s, x0 in zip(states, start)]


# ------------------------------------------------------------ the loop

LOG_HEADER = ["iteration", "surrogate_return", "train_progress", "disc_acc", "disc_loss", "gp",
              "mean_reward", "policy_loss", "value_loss", "entropy", "clip_frac"]


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def prepare_demos(cfg: TrainConfig, run_dir: Path) -> DemonstrationSet:
    """Load (and validate) the demonstrations, recording them first if no path is given."""
    if cfg.demo_path:
        demos = load_demos(cfg.demo_path, resolution=cfg.resolution)
    else:
        path = run_dir / "demos.rmd"
        if path.exists():
            demos = load_demos(path, resolution=cfg.resolution)
        else:
            demos = record_demos(cfg.n_demos, cfg.demo_seed, cfg.resolution, cfg.horizon)
            save_demos(demos, path)
    if demos.env_id != cfg.env_id:
        raise ValueError(f"demonstrations come from {demos.env_id!r}, config expects {cfg.env_id!r}")
    if len(demos) < cfg.n_demos:
        raise ValueError(f"config asks for {cfg.n_demos} demonstrations, file holds {len(demos)}")
    demos.episodes = demos.episodes[:cfg.n_demos]
    return demos


def run_seed(cfg: TrainConfig, seed: int, demos: DemonstrationSet, out_dir: Path,
             log=print) -> dict:
    """Train one seed; writes ``log.csv``, ``timing.csv``, ``eval.csv`` and checkpoints."""
    out_dir.mkdir(parents=True, exist_ok=True)
    expert_states = demos.stacked_states(cfg.k)
    moments = RunningMoments()
    learners = [Learner(cfg, seed, i, expert_states, moments) for i in range(cfg.n_learners)]
    ppo_cfg = cfg.ppo_config()
    rows, timing, evals = [], [], []
    # finished episodes end rarely within one collection phase; report a rolling window
    recent_sur: deque = deque(maxlen=RECENT)
    recent_prog: deque = deque(maxlen=RECENT)
    t0 = time.process_time()

    def do_eval(it: int):
        scores = evaluate(learners[0].policy, cfg.k, cfg.resolution, cfg.eval_episodes, cfg.horizon)
        evals.extend((it, e, s) for e, s in enumerate(scores))
        return scores

    for it in range(1, cfg.i_max + 1):
        collected = [ln.collect() for ln in learners]
        moments.update(np.concatenate([ln.data["returns"] for ln in learners]))
        d_stats, p_stats = [], []
        for _ in range(cfg.t_max):
            for _ in range(cfg.d_max):
                results = [ln.disc_gradients() for ln in learners]
                avg = average_gradients([g for g, _ in results])
                for ln in learners:
                    ln.disc_opt.step(avg)
                d_stats += [s for _, s in results]
            for _ in range(cfg.g_max):
                results = [ln.ppo_gradients(ppo_cfg) for ln in learners]
                pavg = average_gradients([r[0] for r in results])
                vavg = average_gradients([r[1] for r in results])
                for ln in learners:
                    ln.policy_opt.step(pavg)
                    ln.value_opt.step(vavg)
                p_stats += [r[2] for r in results]
        if cfg.check_sync:
            check_synchrony(learners)
        for c in collected:
            recent_sur.extend(c.surrogate_returns)
            recent_prog.extend(c.progress)
        row = [
            it,
            _mean(recent_sur),
            _mean(recent_prog),
            _mean([s["disc_acc"] for s in d_stats]),
            _mean([s["disc_loss"] for s in d_stats]),
            _mean([s["gp"] for s in d_stats]),
            _mean([c.mean_reward for c in collected]),
            _mean([s["policy_loss"] for s in p_stats]),
            _mean([s["value_loss"] for s in p_stats]),
            _mean([s["entropy"] for s in p_stats]),
            _mean([s["clip_frac"] for s in p_stats]),
        ]
        rows.append(row)
        timing.append((it, time.process_time() - t0))
        if it % cfg.eval_every == 0 or it == cfg.i_max:
            scores = do_eval(it)
            log(f"seed {seed} iter {it}: eval progress {np.mean(scores):.2f} "
                f"disc_acc {row[3]:.3f} surrogate {row[1]:.2f} cpu {timing[-1][1]:.0f}s")
        write_csv(out_dir / "log.csv", LOG_HEADER, rows)
        write_csv(out_dir / "timing.csv", ["iteration", "cpu_seconds"], timing)
        write_csv(out_dir / "eval.csv", ["iteration", "episode", "score"], evals)

    if cfg.save_checkpoints:
        lead = learners[0]
        for name, net in (("policy", lead.policy), ("value", lead.value), ("disc", lead.disc)):
            save_checkpoint(out_dir / f"{name}.ckpt", net.state_dict(), config_hash(net.cfg))
    final = [s for i, _, s in evals if i == cfg.i_max]
    return {"seed": seed, "final_scores": final, "cpu_seconds": timing[-1][1]}


def run_training(cfg: TrainConfig, run_dir, log=print) -> dict:
    """Train every seed in ``cfg.seeds`` under ``run_dir`` and write the report."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_config(cfg))
    demos = prepare_demos(cfg, run_dir)
    results = []
    for seed in cfg.seeds:
        results.append(run_seed(cfg, seed, demos, run_dir / f"seed_{seed}", log=log))
    summary = emit_report(run_dir)
    summary["expert_score"] = demos.expert_score
    summary["seeds"] = results
    return summary


def load_policy(checkpoint, cfg: TrainConfig) -> PolicyNet:
    """Rebuild the policy described by ``cfg`` and load its weights."""
    policy = PolicyNet(cfg.agent_config(VARIANTS[cfg.variant][1]))
    state, _ = load_checkpoint(checkpoint, expect_hash=config_hash(policy.cfg))
    policy.load_state_dict(state)
    return policy


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:16]
