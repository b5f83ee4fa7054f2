import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relmimic import env as E


def _free_fall(y, vy, steps):
    """Hand integration of the airborne body: gravity plus linear drag."""
    h = E.DT / E.SUBSTEPS
    for _ in range(steps * E.SUBSTEPS):
        vy += h * (-E.GRAVITY - E.AIR_DRAG * vy / E.MASS)
        y += h * vy
    return y, vy


def test_zero_action_falls_then_contacts():
    s = E.env_reset(0)
    ys = [s.y]
    for i in range(3):
        s, _ = E.env_step(s, np.zeros(2))
        ys.append(s.y)
    assert ys[0] > ys[1] > ys[2]       # falling, then the ground arrests the body
    assert ys[3] > ys[2]
    # the first step is airborne: the foot starts 2 cm above ground
    s0 = E.env_reset(0)
    s1, _ = E.env_step(s0, np.zeros(2))
    y_oracle, vy_oracle = _free_fall(s0.y, s0.vy, 1)
    assert s1.y == pytest.approx(y_oracle, abs=1e-12)
    assert s1.vy == pytest.approx(vy_oracle, abs=1e-12)
    assert E.foot_position(s1)[1] > 0


def test_same_seed_and_actions_bit_identical():
    acts = np.random.default_rng(0).uniform(-1, 1, size=(60, 2))

    def run():
        s = E.env_reset(7)
        frames = []
        for a in acts:
            s, done = E.env_step(s, a)
            frames.append(E.render(s))
            if done:
                break
        return s, frames

    (s1, f1), (s2, f2) = run(), run()
    assert s1 == s2
    assert all(np.array_equal(a, b) for a, b in zip(f1, f2))


def test_saturated_alternating_actions_stay_finite():
    s = E.env_reset(0)
    for t in range(1000):
        a = np.array([1.0, -1.0]) if t % 2 else np.array([-1.0, 1.0])
        s, _ = E.env_step(s, a)
        assert all(math.isfinite(v) for v in dataclasses.astuple(s))


def test_episode_ends_on_fall_or_horizon():
    rng = np.random.default_rng(5)
    s, done = E.env_reset(5), False
    while not done:
        s, done = E.env_step(s, rng.uniform(-1, 1, 2))
        assert done == (E.fell(s) or s.t >= E.HORIZON)
    s = dataclasses.replace(E.env_reset(0), t=E.HORIZON - 1)
    nxt, done = E.env_step(s, np.zeros(2))
    assert done and nxt.t == E.HORIZON


def test_render_is_pure_and_bytes():
    s = E.env_reset(3)
    f1, f2 = E.render(s), E.render(dataclasses.replace(s))
    assert f1.dtype == np.uint8 and f1.shape == (32, 32)
    assert np.array_equal(f1, f2)
    assert set(np.unique(f1)) <= {E.SKY, E.EARTH, E.GROUND_LINE, E.TICK, E.BODY}


def test_tick_shift_by_one_spacing_is_invisible():
    s = E.env_reset(0)
    moved = dataclasses.replace(s, x=s.x + E.TICK_SPACING)
    assert np.array_equal(E.render(s), E.render(moved))


def test_tick_shift_by_half_spacing_moves_ticks():
    ppm = 32 / E.VIEW_METERS
    cam = 0.013
    before = E.tick_columns(cam, 32)
    after = E.tick_columns(cam + E.TICK_SPACING / 2, 32)
    shift = round(E.TICK_SPACING / 2 * ppm)
    expect = sorted(c - shift for c in before if 0 <= c - shift < 32)
    assert all(c in after for c in expect)
    assert len(after) >= len(expect)


def test_stack_frames_padding_and_k1():
    frames = [np.full((2, 2), i, np.uint8) for i in range(5)]
    s0 = E.stack_frames(frames[:1], 4)
    assert s0.shape == (4, 2, 2) and np.all(s0 == 0)
    assert np.array_equal(E.stack_frames(frames, 1), frames[-1][None])
    assert np.array_equal(E.stack_frames(frames, 3)[:, 0, 0], [2, 3, 4])
    with pytest.raises(ValueError):
        E.stack_frames(frames, 0)
    with pytest.raises(ValueError):
        E.stack_frames([], 2)


def test_frame_stacker_recency():
    st_ = E.FrameStacker(4)
    s = E.env_reset(0)
    st_.reset(E.render(s))
    prev_frame = E.render(s)
    for _ in range(6):
        prev_stack = st_.state()
        s, _ = E.env_step(s, E.scripted_expert(s))
        cur = st_.push(E.render(s))
        assert np.array_equal(cur[-2], prev_frame) and np.array_equal(cur[-1], E.render(s))
        assert np.array_equal(cur[:-1], prev_stack[1:])
        prev_frame = E.render(s)


def test_expert_is_deterministic_and_never_falls():
    s = E.env_reset(0)
    assert np.array_equal(E.scripted_expert(s), E.scripted_expert(dataclasses.replace(s)))
    states = E.rollout(E.scripted_expert, seed=0)
    assert len(states) == E.HORIZON + 1
    assert not any(E.fell(x) for x in states)


def test_expert_beats_random_by_ten_times():
    n = 20
    expert = np.mean([E.progress_score(E.rollout(E.scripted_expert, seed=i)) for i in range(n)])
    rng = np.random.default_rng(0)
    rand = np.mean([E.progress_score(E.rollout(lambda s: rng.uniform(-1, 1, 2), seed=i)) for i in range(n)])
    assert expert >= 10 * rand


def test_demo_round_trip(tmp_path):
    demos = E.record_demos(2, seed=0, resolution=16, horizon=30)
    path = tmp_path / "d.rmd"
    E.save_demos(demos, path)
    back = E.load_demos(path, resolution=16)
    assert len(back) == 2 and back.expert_score == demos.expert_score
    assert all(np.array_equal(a, b) for a, b in zip(demos.episodes, back.episodes))
    E.save_demos(back, tmp_path / "e.rmd")
    assert path.read_bytes() == (tmp_path / "e.rmd").read_bytes()


def test_demo_header_layout(tmp_path):
    demos = E.record_demos(1, seed=0, resolution=8, horizon=5)
    path = tmp_path / "d.rmd"
    E.save_demos(demos, path)
    blob = path.read_bytes()
    assert blob[:8] == b"RMDEMO01"
    count, res, length = np.frombuffer(blob[8:20], dtype="<u4")
    assert (count, res, length) == (1, 8, 6)
    assert len(blob) == 8 + 12 + 6 * 64 + 4


def test_demo_corruption_and_mismatch(tmp_path):
    demos = E.record_demos(1, seed=0, resolution=8, horizon=5)
    path = tmp_path / "d.rmd"
    E.save_demos(demos, path)
    blob = bytearray(path.read_bytes())
    with pytest.raises(ValueError, match="expected 32 but found 8"):
        E.load_demos(path, resolution=32)
    blob[30] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="CRC"):
        E.load_demos(path)
    path.write_bytes(b"NOTADEMO" + bytes(blob[8:]))
    with pytest.raises(ValueError, match="magic"):
        E.load_demos(path)


def test_demos_hold_states_only():
    demos = E.record_demos(1, seed=0, resolution=8, horizon=5)
    assert {f.name for f in dataclasses.fields(demos)} == {
        "episodes", "env_id", "resolution", "frame_rate", "expert_score"}
    assert not hasattr(demos, "actions")
    stacked = demos.stacked_states(4)
    assert stacked.shape == (5, 4, 8, 8)
    assert np.array_equal(stacked[0][-2:], demos.episodes[0][:2])


def test_vec_env_auto_reset_and_truncation():
    venv = E.VecEnv(2, 4, 16, base_seed=0, horizon=5)
    obs = venv.observe()
    assert obs.shape == (2, 4, 16, 16)
    for t in range(5):
        nxt, dones, truncs, scores = venv.step(np.zeros((2, 2)))
    assert truncs.all() and not dones.any() and len(scores) == 2
    assert all(s.t == 0 for s in venv.states)


@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_render_pixels_are_valid(seed, steps):
    rng = np.random.default_rng(seed)
    s = E.env_reset(seed)
    for _ in range(steps):
        s, done = E.env_step(s, rng.uniform(-1, 1, 2))
        if done:
            break
    frame = E.render(s)
    assert frame.dtype == np.uint8 and frame.shape == (32, 32)
    assert (frame == E.BODY).any()
