"""Pixel-rendered planar hopper toy, frame stacking and a scripted expert.

The body is a point mass carried by a massless two-segment leg (hip + knee).
Joints are position-servoed towards targets chosen by the action, and the
foot touches the ground through a spring-damper with Coulomb friction, so
forward progress only comes from pushing the foot backwards while it is in
stance.  Everything is plain float arithmetic so trajectories are
bit-reproducible from (seed, actions).
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

# physics
DT = 0.05
SUBSTEPS = 10
GRAVITY = 9.81
MASS = 1.0
THIGH = 0.5
SHIN = 0.5
GROUND_K = 2000.0
GROUND_C = 40.0
FRICTION = 1.0
FRICTION_VISC = 200.0
AIR_DRAG = 0.1
SERVO_KP = 150.0
SERVO_KD = 25.0
JOINT_SPEED = 4.0
HIP_RANGE = 0.9
KNEE_RANGE = 1.4
FALL_HEIGHT = 0.35
HORIZON = 500

# rendering
VIEW_METERS = 3.2
GROUND_ROW = 0.8
TICK_SPACING = 0.8
SKY, EARTH, GROUND_LINE, TICK, BODY = 0, 60, 140, 200, 255


@dataclass(frozen=True)
class WalkerToyState:
    x: float
    y: float
    vx: float
    vy: float
    hip: float
    knee: float
    hip_vel: float
    knee_vel: float
    t: int = 0


def action_to_targets(action) -> tuple[float, float]:
    a0 = min(1.0, max(-1.0, float(action[0])))
    a1 = min(1.0, max(-1.0, float(action[1])))
    return a0 * HIP_RANGE, a1 * KNEE_RANGE


def targets_to_action(hip: float, knee: float) -> np.ndarray:
    return np.clip(np.array([hip / HIP_RANGE, knee / KNEE_RANGE]), -1.0, 1.0)


def foot_position(s: WalkerToyState) -> tuple[float, float]:
    fx = s.x + THIGH * math.sin(s.hip) + SHIN * math.sin(s.hip + s.knee)
    fy = s.y - THIGH * math.cos(s.hip) - SHIN * math.cos(s.hip + s.knee)
    return fx, fy


def knee_position(s: WalkerToyState) -> tuple[float, float]:
    return s.x + THIGH * math.sin(s.hip), s.y - THIGH * math.cos(s.hip)


def env_reset(seed: int = 0) -> WalkerToyState:
    """Standing pose with the foot just above the ground.

    The seed perturbs the initial joint angles by a few milliradians so that
    different seeds give different (but reproducible) episodes.
    """
    rng = np.random.default_rng(seed)
    hip, knee = (float(v) for v in rng.uniform(-0.005, 0.005, size=2))
    s = WalkerToyState(0.0, 0.0, 0.0, 0.0, hip, knee, 0.0, 0.0, 0)
    _, fy = foot_position(s)
    return replace(s, y=-fy + 0.02)


def _substep(x, y, vx, vy, hip, knee, dhip, dknee, hip_t, knee_t, h):
    # joint servo (the leg is massless so contact does not load the servo)
    ahip = SERVO_KP * (hip_t - hip) - SERVO_KD * dhip
    aknee = SERVO_KP * (knee_t - knee) - SERVO_KD * dknee
    dhip += h * ahip
    dknee += h * aknee
    dhip = min(JOINT_SPEED, max(-JOINT_SPEED, dhip))
    dknee = min(JOINT_SPEED, max(-JOINT_SPEED, dknee))
    hip += h * dhip
    knee += h * dknee
    if hip > HIP_RANGE:
        hip, dhip = HIP_RANGE, min(dhip, 0.0)
    elif hip < -HIP_RANGE:
        hip, dhip = -HIP_RANGE, max(dhip, 0.0)
    if knee > KNEE_RANGE:
        knee, dknee = KNEE_RANGE, min(dknee, 0.0)
    elif knee < -KNEE_RANGE:
        knee, dknee = -KNEE_RANGE, max(dknee, 0.0)

    s1, c1 = math.sin(hip), math.cos(hip)
    s12, c12 = math.sin(hip + knee), math.cos(hip + knee)
    fy = y - THIGH * c1 - SHIN * c12
    fx_vel = vx + THIGH * c1 * dhip + SHIN * c12 * (dhip + dknee)
    fy_vel = vy + THIGH * s1 * dhip + SHIN * s12 * (dhip + dknee)

    fx_force = -AIR_DRAG * vx
    fy_force = -MASS * GRAVITY - AIR_DRAG * vy
    if fy < 0.0:
        normal = max(0.0, -GROUND_K * fy - GROUND_C * fy_vel)
        limit = FRICTION * normal
        fx_force += min(limit, max(-limit, -FRICTION_VISC * fx_vel))
        fy_force += normal
    # semi-implicit Euler: velocities first, positions with the new velocities
    vx += h * fx_force / MASS
    vy += h * fy_force / MASS
    x += h * vx
    y += h * vy
    return x, y, vx, vy, hip, knee, dhip, dknee


def env_step(state: WalkerToyState, action) -> tuple[WalkerToyState, bool]:
    """Advance one control step; returns ``(next_state, done)``."""
    hip_t, knee_t = action_to_targets(action)
    vals = (state.x, state.y, state.vx, state.vy, state.hip, state.knee,
            state.hip_vel, state.knee_vel)
    h = DT / SUBSTEPS
    for _ in range(SUBSTEPS):
        vals = _substep(*vals, hip_t, knee_t, h)
    nxt = WalkerToyState(*vals, t=state.t + 1)
    done = nxt.y < FALL_HEIGHT or nxt.t >= HORIZON
    return nxt, done


def fell(state: WalkerToyState) -> bool:
    return state.y < FALL_HEIGHT


# ---------------------------------------------------------------- rendering

def _pixels_per_meter(res: int) -> float:
    return res / VIEW_METERS


def _to_pixel(wx: float, wy: float, cam_x: float, res: int) -> tuple[float, float]:
    ppm = _pixels_per_meter(res)
    col = (wx - cam_x) * ppm + res / 2.0
    row = GROUND_ROW * res - wy * ppm
    return row, col


def tick_columns(cam_x: float, res: int) -> list[int]:
    """Pixel columns of the ground ticks visible for a camera centred at ``cam_x``."""
    ppm = _pixels_per_meter(res)
    half = VIEW_METERS / 2.0
    first = math.ceil((cam_x - half - TICK_SPACING) / TICK_SPACING)
    last = math.floor((cam_x + half + TICK_SPACING) / TICK_SPACING)
    cols = []
    for m in range(first, last + 1):
        c = int(math.floor((m * TICK_SPACING - cam_x) * ppm + res / 2.0))
        if 0 <= c < res:
            cols.append(c)
    return cols


def _stroke(img: np.ndarray, p0, p1, value: int, width: int) -> None:
    res = img.shape[0]
    length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    n = int(2 * length) + 2
    ts = np.linspace(0.0, 1.0, n)
    rows = np.floor(p0[0] + ts * (p1[0] - p0[0])).astype(np.int64)
    cols = np.floor(p0[1] + ts * (p1[1] - p0[1])).astype(np.int64)
    for dr in range(width):
        for dc in range(width):
            r, c = rows + dr, cols + dc
            ok = (r >= 0) & (r < res) & (c >= 0) & (c < res)
            img[r[ok], c[ok]] = value


def render(state: WalkerToyState, res: int = 32) -> np.ndarray:
    """Side view of the hopper as a ``res x res`` uint8 frame.

    The camera tracks the body horizontally, so motion is visible only
    through the ground ticks scrolling underneath.
    """
    img = np.full((res, res), SKY, dtype=np.uint8)
    ground = int(math.floor(GROUND_ROW * res))
    img[ground + 1:, :] = EARTH
    img[ground, :] = GROUND_LINE
    tick_len = max(2, res // 12)
    for c in tick_columns(state.x, res):
        img[ground + 1:ground + 1 + tick_len, c] = TICK

    width = max(1, res // 32)
    hip = _to_pixel(state.x, state.y, state.x, res)
    knee = _to_pixel(*knee_position(state), state.x, res)
    foot = _to_pixel(*foot_position(state), state.x, res)
    _stroke(img, hip, knee, BODY, width)
    _stroke(img, knee, foot, BODY, width)
    # torso marker: a short vertical stroke above the hip
    top = (hip[0] - 0.25 * _pixels_per_meter(res), hip[1])
    _stroke(img, top, hip, BODY, width + 1)
    return img


# ------------------------------------------------------------- stacking

def stack_frames(history, k: int) -> np.ndarray:
    """Return the ``k`` most recent frames (oldest first) as a ``(k, H, W)`` array.

    Missing history at the start of an episode is filled by repeating the
    first frame.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(history) == 0:
        raise ValueError("history is empty")
    frames = list(history[-k:])
    if len(frames) < k:
        frames = [history[0]] * (k - len(frames)) + frames
    return np.stack(frames, axis=0)


class FrameStacker:
    """Sliding window of the last ``k`` frames for one episode."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.k = k
        self.frames: list[np.ndarray] = []

    def reset(self, frame: np.ndarray) -> np.ndarray:
        self.frames = [frame] * self.k
        return self.state()

    def push(self, frame: np.ndarray) -> np.ndarray:
        self.frames = self.frames[1:] + [frame]
        return self.state()

    def state(self) -> np.ndarray:
        return np.stack(self.frames, axis=0)


# ------------------------------------------------------------- expert

STANCE_END = -0.2   # hip angle where the backward push ends
SWING_END = 0.2     # hip angle where the forward swing ends
SWING_KNEE = 1.0    # knee flexion that lifts the foot during the swing


def scripted_expert(state: WalkerToyState) -> np.ndarray:
    """Relay gait: the gait phase is read off the hip angle and its velocity.

    While the hip sweeps backwards the leg is straight and the foot pushes
    the body forwards; past ``STANCE_END`` the knee folds and the leg swings
    forwards until ``SWING_END``, where the next stance begins.
    """
    if state.hip_vel <= 0.0:
        stance = state.hip > STANCE_END
    else:
        stance = state.hip >= SWING_END
    if stance:
        return targets_to_action(-HIP_RANGE, 0.0)
    return targets_to_action(HIP_RANGE, SWING_KNEE)


def rollout(policy, seed: int = 0, horizon: int = HORIZON):
    s = env_reset(seed)
    states = [s]
    for _ in range(horizon):
        s, done = env_step(s, policy(s))
        states.append(s)
        if done:
            break
    return states


def progress_score(states) -> float:
    """Forward distance covered by an episode, floored at zero."""
    return max(0.0, states[-1].x - states[0].x)


# ------------------------------------------------------------- demonstrations

DEMO_MAGIC = b"RMDEMO01"
ENV_ID = "hopper-toy-v0"
FRAME_RATE = 1.0 / DT


@dataclass
class DemonstrationSet:
    """State-only demonstrations: one uint8 ``(T + 1, res, res)`` video per episode."""

    episodes: list
    env_id: str = ENV_ID
    resolution: int = 32
    frame_rate: float = FRAME_RATE
    expert_score: float = float("nan")

    def __post_init__(self):
        for i, ep in enumerate(self.episodes):
            if ep.dtype != np.uint8 or ep.ndim != 3 or ep.shape[1:] != (self.resolution, self.resolution):
                raise ValueError(f"episode {i}: expected uint8 (T, {self.resolution}, {self.resolution}), "
                                 f"got {ep.dtype} {ep.shape}")

    def __len__(self) -> int:
        return len(self.episodes)

    def stacked_states(self, k: int) -> np.ndarray:
        """Every post-action stacked state ``s_{t+1}^k`` of every episode."""
        out = []
        for ep in self.episodes:
            frames = list(ep)
            for t in range(1, len(frames)):
                out.append(stack_frames(frames[:t + 1], k))
        return np.stack(out)


def record_demos(n: int, seed: int = 0, resolution: int = 32, horizon: int = HORIZON) -> DemonstrationSet:
    if n < 1:
        raise ValueError(f"need at least one demonstration, got n={n}")
    episodes, scores = [], []
    for i in range(n):
        states = rollout(scripted_expert, seed + i, horizon)
        episodes.append(np.stack([render(s, resolution) for s in states]))
        scores.append(progress_score(states))
    return DemonstrationSet(episodes, resolution=resolution, expert_score=float(np.mean(scores)))


def _demo_payload(demos: DemonstrationSet) -> bytes:
    parts = [struct.pack("<II", len(demos.episodes), demos.resolution)]
    for ep in demos.episodes:
        parts.append(struct.pack("<I", ep.shape[0]))
        parts.append(np.ascontiguousarray(ep).tobytes())
    return b"".join(parts)


def save_demos(demos: DemonstrationSet, path) -> None:
    """Write ``RMDEMO01`` + u32 count + u32 res + episodes + CRC-32.

    Each episode is a u32 frame count followed by the raw frames.  The
    CRC covers every byte between the magic and the checksum.  Metadata
    that the binary format has no slot for goes to ``<path>.json``.
    """
    payload = _demo_payload(demos)
    with open(path, "wb") as fh:
        fh.write(DEMO_MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
    meta = {"env_id": demos.env_id, "resolution": demos.resolution,
            "frame_rate": demos.frame_rate, "expert_score": demos.expert_score}
    with open(f"{path}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_demos(path, resolution: int | None = None) -> DemonstrationSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != DEMO_MAGIC:
        raise ValueError(f"{path}: not a demo file (magic {blob[:8]!r}, expected {DEMO_MAGIC!r})")
    payload, (crc,) = blob[8:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: CRC mismatch (stored {crc:#010x}, computed {zlib.crc32(payload):#010x})")
    count, res = struct.unpack_from("<II", payload, 0)
    if resolution is not None and res != resolution:
        raise ValueError(f"{path}: resolution mismatch, expected {resolution} but found {res}")
    off = 8
    episodes = []
    for i in range(count):
        if off + 4 > len(payload):
            raise ValueError(f"{path}: truncated header of episode {i}")
        (length,) = struct.unpack_from("<I", payload, off)
        off += 4
        nbytes = length * res * res
        if off + nbytes > len(payload):
            raise ValueError(f"{path}: episode {i} claims {length} frames but the file is too short")
        ep = np.frombuffer(payload, dtype=np.uint8, count=nbytes, offset=off).reshape(length, res, res)
        episodes.append(ep.copy())
        off += nbytes
    if off != len(payload):
        raise ValueError(f"{path}: {len(payload) - off} unexpected trailing bytes")
    meta = {}
    try:
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    return DemonstrationSet(
        episodes,
        env_id=meta.get("env_id", ENV_ID),
        resolution=res,
        frame_rate=meta.get("frame_rate", FRAME_RATE),
        expert_score=meta.get("expert_score", float("nan")),
    )


# ------------------------------------------------------------- batched envs

class VecEnv:
    """``n`` independent hoppers with frame stacking and auto-reset.

    Episodes are seeded ``base_seed, base_seed + 1, ...`` in the order they
    start, so a run is reproducible regardless of how long each one lasts.
    """

    def __init__(self, n: int, k: int, resolution: int, base_seed: int, horizon: int = HORIZON):
        self.n, self.k, self.res, self.horizon = n, k, resolution, horizon
        self.next_seed = base_seed
        self.states: list[WalkerToyState] = []
        self.stackers = [FrameStacker(k) for _ in range(n)]
        self.start_x = [0.0] * n
        for i in range(n):
            self._reset(i)

    def _reset(self, i: int) -> None:
        s = env_reset(self.next_seed)
        self.next_seed += 1
        if i < len(self.states):
            self.states[i] = s
        else:
            self.states.append(s)
        self.start_x[i] = s.x
        self.stackers[i].reset(render(s, self.res))

    def observe(self) -> np.ndarray:
        return np.stack([st.state() for st in self.stackers])

    def step(self, actions: np.ndarray):
        """Returns ``(next_obs, dones, truncated, finished_scores)``.

        ``next_obs`` is the post-action stacked state even when the episode
        ended (the env is reset afterwards); ``finished_scores`` lists the
        progress of episodes that ended on this step.
        """
        next_obs, dones, truncs, scores = [], [], [], []
        for i in range(self.n):
            s, done = env_step(self.states[i], actions[i])
            self.states[i] = s
            next_obs.append(self.stackers[i].push(render(s, self.res)))
            terminal = fell(s)
            trunc = done and not terminal
            if s.t >= self.horizon and not terminal:
                trunc, done = True, True
            dones.append(terminal)
            truncs.append(trunc)
            if done:
                scores.append(max(0.0, s.x - self.start_x[i]))
                self._reset(i)
        return np.stack(next_obs), np.array(dones), np.array(truncs), scores
