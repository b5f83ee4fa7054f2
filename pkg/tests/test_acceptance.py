"""Acceptance criteria, one test each; every test records a pass/fail line."""

import dataclasses
import math
import time

import numpy as np
import pytest

from relmimic import env as E
from relmimic import gail as G
from relmimic import networks as N
from relmimic import ops
from relmimic import ppo as P
from relmimic import relational as R
from relmimic import tensor as T
from relmimic.experiments import desk_config, desk_imitation
from relmimic.metrics import read_csv
from relmimic.tensor import Tensor, grad, record_selections, replay_selections, tsum
from relmimic.trainer import VARIANTS, run_training

from conftest import directional_check, record_acceptance

N_SEEDS = 20


# ---------------------------------------------------------------- criterion 1

def _coordinate_check(fn, arrays, step=1e-5):
    """Max per-coordinate relative error of d sum(fn * g) over every input array.

    Relu masks and pooling choices are replayed from the unperturbed pass.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    g = Tensor(np.random.default_rng(0).normal(size=fn(*leaves).shape))
    with record_selections() as tape:
        scalar = tsum(fn(*leaves) * g)
    analytic = grad(scalar, leaves)
    worst = 0.0
    for i, a in enumerate(arrays):
        num = np.zeros(a.size)
        flat = leaves[i].data.reshape(-1)
        for j in range(a.size):
            orig = flat[j]
            vals = []
            for s in (step, -step):
                flat[j] = orig + s
                with replay_selections(tape):
                    vals.append(tsum(fn(*leaves) * g).item())
            flat[j] = orig
            num[j] = (vals[0] - vals[1]) / (2 * step)
        an = analytic[i].data.reshape(-1)
        err = np.abs(an - num) / np.maximum(1e-6, np.abs(an) + np.abs(num))
        worst = max(worst, float(err.max()))
    return worst


def _off_kinks(rng, shape):
    x = rng.normal(size=shape)
    x[np.abs(x) < 0.05] += 0.2
    x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.2
    return x


def _op_cases(rng):
    """``name -> (fn, arrays)`` covering every differentiable primitive."""
    x = _off_kinks(rng, (3, 4))
    y = rng.normal(size=(1, 4))
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    img = rng.normal(size=(1, 2, 5, 5))
    idx = rng.integers(0, 12, size=(2, 5))
    return {
        "add": (T.add, [x, y]),
        "sub": (T.sub, [x, y]),
        "mul": (T.mul, [x, y]),
        "div": (T.div, [x, pos]),
        "neg": (T.neg, [x]),
        "power": (lambda a: T.power(a, 1.5), [pos]),
        "sqrt": (T.sqrt, [pos]),
        "exp": (T.exp, [x]),
        "log": (T.log, [pos]),
        "sigmoid": (T.sigmoid, [x]),
        "softplus": (T.softplus, [x]),
        "log_sigmoid": (T.log_sigmoid, [x]),
        "tanh": (T.tanh, [x]),
        "lrelu": (lambda a: T.lrelu(a, 0.1), [x]),
        "relu": (T.relu, [x]),
        "clip": (lambda a: T.clip(a, -0.5, 0.5), [x]),
        "minimum": (T.minimum, [x, _off_kinks(rng, (3, 4)) + 0.3]),
        "tsum": (lambda a: T.tsum(a, axis=0, keepdims=True), [x]),
        "mean": (lambda a: T.mean(a, axis=1), [x]),
        "matmul": (T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))]),
        "reshape": (lambda a: T.reshape(a, (2, 6)), [x]),
        "transpose": (T.transpose, [x]),
        "swap_last": (T.swap_last, [img]),
        "getitem": (lambda a: T.getitem(a, (slice(1, None), slice(None, None, 2))), [x]),
        "embed": (lambda a: T.embed(a, (slice(1, 3),), (4, 4)), [rng.normal(size=(2, 4))]),
        "pad": (lambda a: T.pad(a, ((1, 0), (2, 1))), [x]),
        "concat": (lambda a, b: T.concat([a, b], axis=0), [x, rng.normal(size=(2, 4))]),
        "gather": (lambda a: T.gather(a, idx), [x]),
        "scatter_add": (lambda a: T.scatter_add(a, idx, (3, 4)), [rng.normal(size=idx.shape)]),
        "broadcast_to": (lambda a: T.broadcast_to(a, (2, 3, 4)), [y]),
        "sum_to": (lambda a: T.sum_to(a, (1, 4)), [x]),
        "unfold": (lambda a: T.unfold(a, 3, 2, 2, 1), [img]),
        "fold": (lambda a: T.fold(a, (1, 2, 5, 5), 3, 2, 2, 1),
                 [rng.normal(size=T.unfold(Tensor(img), 3, 2, 2, 1).shape)]),
        "conv2d": (lambda a, w, b: ops.conv2d(a, w, b, stride=2, padding=1),
                   [img, rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        "max_pool3d": (lambda a: ops.max_pool3d(a, (2, 2, 2), (2, 1, 1), (0, 0, 0)),
                       [rng.normal(size=(1, 4, 3, 3))]),
        "softmax_rows": (ops.softmax_rows, [x * 2]),
        "layer_norm": (ops.layer_norm, [x, rng.normal(size=4), rng.normal(size=4)]),
        "dense": (ops.dense, [x, rng.normal(size=(2, 4)), rng.normal(size=2)]),
    }


def _relational_case(rng):
    u = rng.normal(size=(2, 4, 2, 3))
    ws = [rng.normal(size=(2, 4)) * 0.5 for _ in range(3)] + [rng.normal(size=(4, 2)) * 0.5]

    def fn(u, wq, wk, wv, we):
        return R.relational_block_forward(u, R.RelationalParams(wq, wk, wv, we))
    return fn, [u] + ws


def _randomise(net, rng, we_scale=0.3):
    for name, p in net.parameters().items():
        if name.endswith("bias"):
            p.data = rng.normal(size=p.shape) * 0.1
    for m in net.modules():
        if isinstance(m, N.RelationalBlock):
            m.we.data = rng.normal(size=m.we.shape) * we_scale


def _residual_error(rng):
    block = N.ResidualBlock(4, rng, post_relu=True)
    _randomise(block, rng)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)), requires_grad=True)
    g = Tensor(rng.normal(size=(2, 4, 5, 5)))
    return directional_check(lambda: tsum(block(x) * g), [x] + list(block.parameters().values()), rng)


def _agent_error(rng, seed):
    net = N.build_agent(N.AgentConfig(resolution=16, variant="non_local"), seed)
    _randomise(net, rng)
    x = Tensor(rng.uniform(0, 255, size=(2, 4, 16, 16)), requires_grad=True)
    g = Tensor(rng.normal(size=(2, 256)))
    return directional_check(lambda: tsum(net(x) * g), [x] + list(net.parameters().values()), rng)


def _gp_error(rng, seed):
    disc = N.build_discriminator(N.DiscConfig(resolution=32), seed)
    _randomise(disc, rng)
    disc.out.weight.data = rng.normal(size=disc.out.weight.shape) * 0.1
    disc.train()
    for _, w, sn in disc.spectral_layers():
        sn.freeze(w.data)
    frames = lambda: rng.integers(0, 256, size=(2, 4, 32, 32)).astype(np.uint8)  # noqa: E731
    batch = G.DiscBatch(frames(), frames())
    params = list(disc.parameters().values())
    gp_seed = int(rng.integers(2**31))
    return directional_check(
        lambda: G.discriminator_loss(batch, disc, 10.0, np.random.default_rng(gp_seed))[0],
        params, rng, step=1e-6)


def test_criterion_1_gradient_correctness():
    t0 = time.process_time()
    worst: dict[str, float] = {}
    for seed in range(N_SEEDS):
        rng = np.random.default_rng(seed)
        cases = _op_cases(rng)
        cases["relational_block"] = _relational_case(rng)
        for name, (fn, arrays) in cases.items():
            worst[name] = max(worst.get(name, 0.0), _coordinate_check(fn, arrays))
        worst["residual_block"] = max(worst.get("residual_block", 0.0), _residual_error(rng))
        worst["non_local_agent"] = max(worst.get("non_local_agent", 0.0), _agent_error(rng, seed))
        worst["discriminator_gp"] = max(worst.get("discriminator_gp", 0.0), _gp_error(rng, seed))
    cpu = time.process_time() - t0
    bad = {k: v for k, v in worst.items()
           if v >= (1e-3 if k == "discriminator_gp" else 1e-4)}
    ok = not bad and cpu < 300
    top = max(worst, key=lambda k: worst[k] if k != "discriminator_gp" else 0.0)
    record_acceptance(1, ok, f"{len(worst)} checks x {N_SEEDS} seeds; worst op {top} "
                      f"{worst[top]:.1e}; GP {worst['discriminator_gp']:.1e}; "
                      f"cpu {cpu:.0f}s; failing {sorted(bad)}")
    assert ok


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_relational_identity():
    rng = np.random.default_rng(2)
    local = N.build_agent(N.AgentConfig(variant="local"), 0)
    non_local = N.build_agent(N.AgentConfig(variant="non_local"), 7)
    rel = {id(p) for m in non_local.modules() if isinstance(m, N.RelationalBlock)
           for p in m._params.values()}
    targets = [p for p in non_local.parameters().values() if id(p) not in rel]
    for t, s in zip(targets, local.parameters().values()):
        t.data = s.data.copy()
    for m in non_local.modules():
        if isinstance(m, N.RelationalBlock):
            assert not np.any(m.we.data)
    x = rng.integers(0, 256, size=(3, 4, 32, 32)).astype(np.float64)
    identical = np.array_equal(local(x).data, non_local(x).data)
    u = rng.normal(size=(2, 8, 4, 4)) * 3
    a = R.attention_weights(Tensor(u), Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(4, 8))))
    row_err = float(np.max(np.abs(a.data.sum(-1) - 1.0)))
    ok = identical and row_err < 1e-12
    record_acceptance(2, ok, f"We=0 bit-identical {identical}; attention row-sum error {row_err:.1e}")
    assert ok


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_architecture_accounting():
    local = N.build_agent(N.AgentConfig(resolution=84, k=4, variant="local"), 0)
    non_local = N.build_agent(N.AgentConfig(resolution=84, k=4, variant="non_local"), 0)
    pl, pn = N.count_stats(local).params, N.count_stats(non_local).params
    blocks = [m for m in non_local.modules() if isinstance(m, N.RelationalBlock)]
    four_1x1 = sum(p.data.size for b in blocks for p in b._params.values())
    rel_dev = abs(pn - 0.4577e6) / 0.4577e6
    ok = (local.conv_depth == 13 and non_local.conv_depth == 15 and rel_dev <= 0.15
          and pn - pl == four_1x1 and len(blocks) == 1)
    record_acceptance(3, ok, f"depth {local.conv_depth}/{non_local.conv_depth}; params {pl}/{pn} "
                      f"({rel_dev:.1%} from 0.4577M); delta {pn - pl} vs 1x1 convs {four_1x1}")
    assert ok


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_discriminator_regularizers():
    rng = np.random.default_rng(4)
    disc = N.build_discriminator(N.DiscConfig(resolution=32), 3)
    for b in disc.relational_blocks():
        b.we.data = rng.normal(size=b.we.shape)
    disc.out.weight.data = rng.normal(size=disc.out.weight.shape) * 0.1
    disc.train()
    x = rng.uniform(0, 255, size=(2, 4, 32, 32))
    for _ in range(60):
        disc.logit(x)
    sigmas = []
    for _, w, sn in disc.spectral_layers():
        eff = (w.data / sn.sigma(w.data)).reshape(w.shape[0], -1)
        sigmas.append(np.linalg.svd(eff, compute_uv=False)[0])
    sn_ok = all(0.99 <= s <= 1.01 for s in sigmas)

    w = rng.normal(size=(4, 8, 8))
    w /= np.linalg.norm(w)
    gp = G.gradient_penalty(lambda z: tsum(z * Tensor(w), axis=(1, 2, 3)),
                            rng.uniform(size=(6, 4, 8, 8)), rng.uniform(size=(6, 4, 8, 8)), rng).item()

    const = N.build_discriminator(N.DiscConfig(resolution=32), 0)
    const.out.weight.data[:] = 0.0
    const.out.bias.data[:] = 0.0
    frames = lambda n: rng.integers(0, 256, size=(n, 4, 32, 32)).astype(np.uint8)  # noqa: E731
    value = G.gail_value(G.DiscBatch(frames(3), frames(3)), const).item()
    reward = G.surrogate_reward(frames(5), const)
    v_err = abs(value - 2 * math.log(0.5))
    r_err = float(np.max(np.abs(reward - math.log(2.0))))
    ok = sn_ok and abs(gp) < 1e-10 and v_err < 1e-12 and r_err < 1e-12
    record_acceptance(4, ok, f"top singular values in [{min(sigmas):.4f}, {max(sigmas):.4f}]; "
                      f"unit-gradient GP {abs(gp):.1e}; value error {v_err:.1e}; reward error {r_err:.1e}")
    assert ok


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_ppo_sanity():
    t0 = time.process_time()
    trace = P.quadratic_bandit(updates=500, mu0=2.0, seed=0)
    cpu = time.process_time() - t0
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 40))
        log_ratio = rng.uniform(np.log(0.8), np.log(1.2), size=n)
        adv = rng.normal(size=n) * 5
        clipped = P.ppo_policy_loss(Tensor(log_ratio), np.zeros(n), adv, 0.2).item()
        worst = max(worst, abs(clipped + np.mean(np.exp(log_ratio) * adv)))
    ok = abs(trace[-1]) < 0.1 and cpu < 120 and worst < 1e-12
    record_acceptance(5, ok, f"bandit |mu| {abs(trace[-1]):.4f} after 500 updates in {cpu:.1f}s; "
                      f"clipped vs unclipped inside [0.8, 1.2] {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- criterion 6

@pytest.mark.slow
def test_criterion_6_desk_imitation(tmp_path):
    cfg = desk_config()
    assert (cfg.resolution, cfg.k, cfg.n_demos, cfg.n_learners, len(cfg.seeds), cfg.i_max) == \
        (32, 4, 8, 2, 3, 300)
    assert cfg.variant == "non-local-reward"
    res = desk_imitation(tmp_path, cfg, log=lambda m: None)
    full, ablation = res["full"], res["ablation"]
    ok = full["best"] >= 0.7 and full["cpu_seconds"] < 3600 and ablation["best"] < 0.2
    record_acceptance(6, ok, f"RM-L-L reaches {full['best']:.0%} of expert ({full['expert']:.1f}) "
                      f"at iteration {full['best_iteration']}, final {full['final']:.0%}, "
                      f"cpu {full['cpu_seconds'] / 60:.1f} min; d_max=0 ablation best "
                      f"{ablation['best']:.0%}")
    assert ok


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_variants_complete(tmp_path):
    cfg = dataclasses.replace(desk_config(), i_max=2, seeds=(0, 1), eval_every=1, eval_episodes=3,
                              c_max=64, n_demos=2)
    problems = []
    demo_path = ""
    for name in VARIANTS:
        out = tmp_path / name
        run_training(dataclasses.replace(cfg, variant=name, demo_path=demo_path), out,
                     log=lambda m: None)
        demo_path = demo_path or str(tmp_path / name / "demos.rmd")
        rows = read_csv(out / "ccdf.csv")
        thr = [float(r["threshold"]) for r in rows]
        surv = [float(r["survival"]) for r in rows]
        area = float(read_csv(out / "summary.csv")[0]["area"])
        curve = read_csv(out / "curve.csv")
        if len(curve) != cfg.i_max or any(r["std"] == "" for r in curve):
            problems.append(f"{name}: incomplete curve")
        if surv[0] != 1.0 or any(b > a for a, b in zip(surv, surv[1:])):
            problems.append(f"{name}: survival not monotone")
        if any(b <= a for a, b in zip(thr, thr[1:])):
            problems.append(f"{name}: thresholds not increasing")
        if not area >= 0.0 or (max(thr) > 0 and area <= 0.0):
            problems.append(f"{name}: area {area}")
    ok = not problems
    record_acceptance(7, ok, f"{len(VARIANTS)} variants ran and reported; problems {problems}")
    assert ok


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_reproducibility(tmp_path):
    cfg = dataclasses.replace(desk_config(), i_max=2, seeds=(0, 1), eval_every=1, eval_episodes=2,
                              c_max=64, n_demos=2, variant="non-local-all")
    for d in ("a", "b"):
        run_training(cfg, tmp_path / d, log=lambda m: None)
    names = ["curve.csv", "ccdf.csv", "summary.csv", "demos.rmd"]
    names += [f"seed_{s}/{f}" for s in cfg.seeds for f in ("log.csv", "eval.csv")]
    differ = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]

    demos = E.load_demos(tmp_path / "a" / "demos.rmd")
    E.save_demos(demos, tmp_path / "copy.rmd")
    round_trip = (tmp_path / "copy.rmd").read_bytes() == (tmp_path / "a" / "demos.rmd").read_bytes()
    blob = bytearray((tmp_path / "copy.rmd").read_bytes())
    blob[len(blob) // 2] ^= 0x01
    (tmp_path / "bad.rmd").write_bytes(bytes(blob))
    try:
        E.load_demos(tmp_path / "bad.rmd")
        crc_caught = False
    except ValueError as exc:
        crc_caught = "CRC" in str(exc)
    ok = not differ and round_trip and crc_caught
    record_acceptance(8, ok, f"{len(names)} files byte-identical across runs (differing {differ}); "
                      f"demo round-trip {round_trip}; corruption caught by CRC {crc_caught}")
    assert ok
