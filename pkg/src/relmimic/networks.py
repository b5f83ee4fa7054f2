"""Agent trunks, policy/value heads and the discriminator.

Layer sequences follow the agent table (conv 7x7/2, a spatial+feature pool,
residual blocks, an optional relational block, a feature-only pool, dense
256) and the reward-network table (five 4x4/2 convs with leaky ReLU and two
relational blocks).  Every layer knows its parameter count, its forward
flop count and how many convolutions it puts on the longest serial path.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .relational import RelationalParams, relational_block_forward
from .tensor import Tensor, as_tensor, clip, exp, lrelu, relu, reshape, sigmoid, tsum

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
DISC_SLOPE = 0.1


# --------------------------------------------------------------- configs

@dataclass
class AgentConfig:
    k: int = 4
    colors: int = 1
    resolution: int = 32
    variant: str = "local"            # "local" | "non_local"
    channels: tuple[int, ...] = (16, 8, 4)
    action_dim: int = 2
    hidden: int = 256

    def __post_init__(self):
        if self.variant not in ("local", "non_local"):
            raise ValueError(f"variant must be 'local' or 'non_local', got {self.variant!r}")
        if self.k < 1 or self.colors < 1 or self.action_dim < 1:
            raise ValueError("k, colors and action_dim must be positive")
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3:
            raise ValueError(f"channels needs 3 entries (conv, after pool 1, after pool 2), got {self.channels}")


@dataclass
class DiscConfig:
    k: int = 4
    colors: int = 1
    resolution: int = 32
    relational: bool = True
    channels: tuple[int, ...] = (16, 32, 32, 32, 32)
    hidden: int = 256

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 5:
            raise ValueError(f"discriminator needs 5 conv widths, got {self.channels}")


def config_hash(cfg) -> bytes:
    return hashlib.sha256(repr(sorted(asdict(cfg).items())).encode()).digest()


@dataclass
class NetStats:
    params: int
    flops: int
    conv_depth: int


# --------------------------------------------------------------- init

def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------- spectral norm

def spectral_normalize(w: np.ndarray, u: np.ndarray, iters: int = 1):
    """Divide ``w`` by its power-iteration estimate of the top singular value.

    ``w`` is flattened to ``(out, -1)``.  Returns ``(w / sigma, u_new)``; a
    zero matrix is returned unchanged.
    """
    mat = w.reshape(w.shape[0], -1)
    for _ in range(iters):
        v = mat.T @ u
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            return w, u
        v = v / nv
        wu = mat @ v
        nu = np.linalg.norm(wu)
        if nu < 1e-12:
            return w, u
        u = wu / nu
    sigma = float(u @ mat @ v)
    if sigma < 1e-12:
        return w, u
    return w / sigma, u


class SpectralState:
    """Persistent left singular vector for one weight."""

    def __init__(self, rows: int, rng: np.random.Generator):
        u = rng.normal(size=rows)
        self.u = u / np.linalg.norm(u)
        self.frozen: tuple[np.ndarray, np.ndarray] | None = None

    def freeze(self, w: np.ndarray) -> None:
        """Hold the singular-vector pair fixed (for finite-difference checks).

        Gradients never flow through the power iteration, so only with a
        frozen pair is ``w / sigma`` exactly the function being differentiated.
        """
        mat = w.reshape(w.shape[0], -1)
        v = mat.T @ self.u
        if np.linalg.norm(v) < 1e-12:
            raise ValueError("cannot freeze spectral state of a zero weight")
        v = v / np.linalg.norm(v)
        u = mat @ v
        self.frozen = (u / np.linalg.norm(u), v)

    def unfreeze(self) -> None:
        self.frozen = None

    def apply(self, w: Tensor, update: bool) -> Tensor:
        if self.frozen is not None:
            u, v = self.frozen
            return w / tsum(reshape(w, (w.shape[0], -1)) * Tensor(np.outer(u, v)))
        mat = w.data.reshape(w.shape[0], -1)
        u = self.u
        v = mat.T @ u
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            return w
        v = v / nv
        wv = mat @ v
        nu = np.linalg.norm(wv)
        if nu < 1e-12:
            return w
        u = wv / nu
        if update:
            self.u = u
        # sigma = u^T W v with u, v held fixed; differentiable in W
        sigma = tsum(reshape(w, (w.shape[0], -1)) * Tensor(np.outer(u, v)))
        return w / sigma

    def sigma(self, w: np.ndarray) -> float:
        mat = w.reshape(w.shape[0], -1)
        v = mat.T @ self.u
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            return 0.0
        return float(self.u @ mat @ (v / nv))


# --------------------------------------------------------------- modules

class Module:
    conv_depth = 0

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def flops(self, in_shape):
        """``(flops, out_shape)`` for one sample of shape ``(C, H, W)`` or ``(D,)``."""
        return 0, in_shape

    def __call__(self, x):
        return self.forward(x)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    @property
    def conv_depth(self) -> int:
        return sum(layer.conv_depth for layer in self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def flops(self, in_shape):
        total = 0
        for layer in self.layers:
            f, in_shape = layer.flops(in_shape)
            total += f
        return total, in_shape


class Standardize(Module):
    def forward(self, x):
        return as_tensor(x) * (1.0 / 255.0)


class Activation(Module):
    def __init__(self, slope: float = 0.0):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return lrelu(x, self.slope) if self.slope else relu(x)


class Flatten(Module):
    def forward(self, x):
        return reshape(x, (x.shape[0], -1))

    def flops(self, in_shape):
        return 0, (int(np.prod(in_shape)),)


class Conv2d(Module):
    conv_depth = 1

    def __init__(self, cin: int, cout: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, bias: bool = True, spectral: bool = False):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = self.add_param("weight", _fan_in_uniform(rng, (cout, cin, kernel, kernel)))
        self.bias = self.add_param("bias", np.zeros(cout)) if bias else None
        self.sn = SpectralState(cout, rng) if spectral else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return self.sn.apply(self.weight, update=self.training)

    def forward(self, x):
        return ops.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)

    def flops(self, in_shape):
        c, h, w = in_shape
        f = self.weight.shape[0]
        ho = ops.conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = ops.conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"conv {self.kernel}x{self.kernel}/{self.stride} maps {h}x{w} to {ho}x{wo}")
        return 2 * f * c * self.kernel ** 2 * ho * wo, (f, ho, wo)


class MaxPool3d(Module):
    def __init__(self, kernel, stride, padding):
        super().__init__()
        self.kernel, self.stride, self.padding = tuple(kernel), tuple(stride), tuple(padding)

    def forward(self, x):
        return ops.max_pool3d(x, self.kernel, self.stride, self.padding)

    def flops(self, in_shape):
        out = tuple(ops.conv_output_size(s, k, st, p)
                    for s, k, st, p in zip(in_shape, self.kernel, self.stride, self.padding))
        if min(out) < 1:
            raise ValueError(f"max pool {self.kernel} maps {in_shape} to {out}")
        return 0, out


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, gain: float = math.sqrt(2.0),
                 spectral: bool = False):
        super().__init__()
        self.weight = self.add_param("weight", _orthogonal(rng, (dout, din), gain))
        self.bias = self.add_param("bias", np.zeros(dout))
        self.sn = SpectralState(dout, rng) if spectral else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return self.sn.apply(self.weight, update=self.training)

    def forward(self, x):
        return ops.dense(x, self.effective_weight(), self.bias)

    def flops(self, in_shape):
        return 2 * self.weight.shape[0] * self.weight.shape[1], (self.weight.shape[0],)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(dim))
        self.bias = self.add_param("bias", np.zeros(dim))

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class ResidualBlock(Module):
    """Pre-activation bottleneck: relu-1x1, relu-3x3, relu-1x1, plus skip.

    The 3x3 convolution is padded by one so the skip connection conforms.
    """

    conv_depth = 3

    def __init__(self, channels: int, rng: np.random.Generator, bottleneck: int | None = None,
                 post_relu: bool = False):
        super().__init__()
        b = bottleneck or channels
        self.channels = channels
        self.post_relu = post_relu
        self.c1 = self.add_child("c1", Conv2d(channels, b, 1, 1, 0, rng))
        self.c2 = self.add_child("c2", Conv2d(b, b, 3, 1, 1, rng))
        self.c3 = self.add_child("c3", Conv2d(b, channels, 1, 1, 0, rng))

    def forward(self, x):
        x = as_tensor(x)
        if x.shape[1] != self.channels:
            raise ValueError(f"residual block expects {self.channels} channels, got {x.shape[1]}")
        h = self.c1(relu(x))
        h = self.c2(relu(h))
        h = self.c3(relu(h))
        out = h + x
        return relu(out) if self.post_relu else out

    def flops(self, in_shape):
        total = 0
        shape = in_shape
        for conv in (self.c1, self.c2, self.c3):
            f, shape = conv.flops(shape)
            total += f
        return total, shape


class RelationalBlock(Module):
    """Module wrapper around :func:`relational_block_forward`.

    The longest serial path is v then e (q and k run in parallel with v),
    so the block adds two convolutions of depth.
    """

    conv_depth = 2

    def __init__(self, channels: int, rng: np.random.Generator, spectral: bool = False):
        super().__init__()
        if channels % 2:
            raise ValueError(f"relational block needs an even channel count, got {channels}")
        half = channels // 2
        bound = math.sqrt(3.0 / channels)
        self.wq = self.add_param("wq", rng.uniform(-bound, bound, size=(half, channels)))
        self.wk = self.add_param("wk", rng.uniform(-bound, bound, size=(half, channels)))
        self.wv = self.add_param("wv", rng.uniform(-bound, bound, size=(half, channels)))
        self.we = self.add_param("we", np.zeros((channels, half)))
        self.sn = {n: SpectralState(self._params[n].shape[0], rng) for n in ("wq", "wk", "wv", "we")} \
            if spectral else None

    def block_params(self) -> RelationalParams:
        if self.sn is None:
            return RelationalParams(self.wq, self.wk, self.wv, self.we)
        w = {n: self.sn[n].apply(self._params[n], update=self.training) for n in self.sn}
        return RelationalParams(w["wq"], w["wk"], w["wv"], w["we"])

    def forward(self, x):
        return relational_block_forward(x, self.block_params())

    def flops(self, in_shape):
        c, h, w = in_shape
        p = h * w
        half = c // 2
        cv = self.wv.shape[0]
        proj = 2 * p * c * (2 * half + cv) + 2 * p * cv * c
        attn = 2 * p * p * half + 2 * p * p * cv
        return proj + attn, in_shape


# --------------------------------------------------------------- builders

class AgentTrunk(Sequential):
    """Pixel encoder ending in a layer-normalised dense-256 feature vector."""

    def __init__(self, cfg: AgentConfig, rng: np.random.Generator):
        c0, c1, c2 = cfg.channels
        cin = cfg.colors * cfg.k
        pooled1 = ops.conv_output_size(c0, 3, 2, 1)
        if pooled1 != c1:
            raise ValueError(f"the first pool reduces {c0} channels to {pooled1}, schedule says {c1}")
        pooled2 = ops.conv_output_size(c1, 3, 2, 1)
        if pooled2 != c2:
            raise ValueError(f"the feature pool reduces {c1} channels to {pooled2}, schedule says {c2}")
        layers: list[Module] = [
            Standardize(),
            Conv2d(cin, c0, 7, 2, 3, rng), Activation(),
            MaxPool3d((3, 3, 3), (2, 2, 2), (1, 1, 1)),                      # channels and space
            ResidualBlock(c1, rng),
        ]
        if cfg.variant == "non_local":
            layers.append(RelationalBlock(c1, rng))
        layers += [
            ResidualBlock(c1, rng, post_relu=True),
            MaxPool3d((3, 1, 1), (2, 1, 1), (1, 0, 0)),                      # channels only
            ResidualBlock(c2, rng),
            ResidualBlock(c2, rng, post_relu=True),
            Flatten(),
        ]
        shape = (cin, cfg.resolution, cfg.resolution)
        for row, layer in enumerate(layers):
            try:
                _, shape = layer.flops(shape)
            except ValueError as exc:
                raise ValueError(f"resolution {cfg.resolution} invalid at layer {row}: {exc}") from None
        layers += [Dense(shape[0], cfg.hidden, rng), LayerNorm(cfg.hidden), Activation()]  # row 10
        super().__init__(*layers)
        self.cfg = cfg

    def input_shape(self) -> tuple[int, int, int]:
        return self.cfg.colors * self.cfg.k, self.cfg.resolution, self.cfg.resolution


def build_agent(cfg: AgentConfig, seed: int = 0) -> AgentTrunk:
    return AgentTrunk(cfg, np.random.default_rng(seed))


def count_stats(net: Module, in_shape=None) -> NetStats:
    if in_shape is None:
        in_shape = net.input_shape()
    flops, _ = net.flops(tuple(in_shape))
    return NetStats(params=net.num_params(), flops=int(flops), conv_depth=net.conv_depth)


@dataclass
class PolicyOutput:
    mean: Tensor
    log_std: Tensor


def gaussian_log_prob(mean: Tensor, log_std: Tensor, action) -> Tensor:
    """Per-sample log density of a diagonal Gaussian, summed over action dims."""
    action = as_tensor(action)
    z = (action - mean) / exp(log_std)
    per_dim = -0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)
    return tsum(per_dim, axis=-1)


def gaussian_entropy(log_std: Tensor) -> Tensor:
    return tsum(log_std + 0.5 * math.log(2 * math.pi * math.e))


class PolicyNet(Module):
    """Separate trunk plus a linear mean head and a state-independent log-std."""

    def __init__(self, cfg: AgentConfig, seed: int = 0, init_log_std: float = 0.0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.trunk = self.add_child("trunk", AgentTrunk(cfg, rng))
        self.mean_head = self.add_child("mean", Dense(cfg.hidden, cfg.action_dim, rng, gain=0.01))
        self.log_std_raw = self.add_param("log_std", np.full(cfg.action_dim, init_log_std))

    @property
    def conv_depth(self) -> int:
        return self.trunk.conv_depth

    def input_shape(self):
        return self.trunk.input_shape()

    def forward(self, x) -> PolicyOutput:
        h = self.trunk(x)
        return PolicyOutput(self.mean_head(h), clip(self.log_std_raw, LOG_STD_MIN, LOG_STD_MAX))

    def flops(self, in_shape):
        f, shape = self.trunk.flops(in_shape)
        g, shape = self.mean_head.flops(shape)
        return f + g, shape


class ValueNet(Module):
    def __init__(self, cfg: AgentConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.trunk = self.add_child("trunk", AgentTrunk(cfg, rng))
        self.head = self.add_child("head", Dense(cfg.hidden, 1, rng, gain=1.0))

    @property
    def conv_depth(self) -> int:
        return self.trunk.conv_depth

    def input_shape(self):
        return self.trunk.input_shape()

    def forward(self, x) -> Tensor:
        return reshape(self.head(self.trunk(x)), (-1,))

    def flops(self, in_shape):
        f, shape = self.trunk.flops(in_shape)
        g, shape = self.head.flops(shape)
        return f + g, shape


def policy_forward(policy: PolicyNet, x) -> PolicyOutput:
    return policy(x)


def value_forward(value: ValueNet, x) -> Tensor:
    return value(x)


class Discriminator(Module):
    """Reward network: five spectrally-normalised 4x4/2 convs, two relational blocks.

    :meth:`logit` is the pre-sigmoid path that the gradient penalty acts
    on; :meth:`forward` returns ``D`` in (0, 1).
    """

    def __init__(self, cfg: DiscConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        cin = cfg.colors * cfg.k
        ch = cfg.channels
        layers: list[Module] = []
        prev = cin
        for i, c in enumerate(ch):
            layers += [Conv2d(prev, c, 4, 2, 1, rng, spectral=True), Activation(DISC_SLOPE)]
            prev = c
            if cfg.relational and i in (2, 3):                  # after the third and fourth convs
                layers.append(RelationalBlock(c, rng, spectral=True))
        layers.append(Flatten())
        shape = (cin, cfg.resolution, cfg.resolution)
        for row, layer in enumerate(layers):
            try:
                _, shape = layer.flops(shape)
            except ValueError as exc:
                raise ValueError(f"resolution {cfg.resolution} invalid at layer {row}: {exc}") from None
        layers += [Dense(shape[0], cfg.hidden, rng, spectral=True), LayerNorm(cfg.hidden),
                   Activation(DISC_SLOPE)]
        self.body = self.add_child("body", Sequential(*layers))
        self.out = self.add_child("out", Dense(cfg.hidden, 1, rng, gain=0.01, spectral=True))
        # zero head: D == 0.5 until the first update, so an untrained reward carries no signal
        self.out.weight.data = np.zeros_like(self.out.weight.data)

    @property
    def conv_depth(self) -> int:
        return self.body.conv_depth

    def input_shape(self):
        return self.cfg.colors * self.cfg.k, self.cfg.resolution, self.cfg.resolution

    def relational_blocks(self) -> list[RelationalBlock]:
        return [m for m in self.modules() if isinstance(m, RelationalBlock)]

    def spectral_layers(self) -> list[tuple[str, Tensor, SpectralState]]:
        out = []
        for m in self.modules():
            if isinstance(m, (Conv2d, Dense)) and m.sn is not None:
                out.append((m.weight.name, m.weight, m.sn))
            elif isinstance(m, RelationalBlock) and m.sn is not None:
                out += [(n, m._params[n], m.sn[n]) for n in m.sn]
        return out

    def logit_standardized(self, x) -> Tensor:
        """Logit of an input already scaled to [0, 1]."""
        return reshape(self.out(self.body(x)), (-1,))

    def logit(self, frames) -> Tensor:
        return self.logit_standardized(as_tensor(frames) * (1.0 / 255.0))

    def forward(self, frames) -> Tensor:
        return sigmoid(self.logit(frames))

    def flops(self, in_shape):
        f, shape = self.body.flops(in_shape)
        g, shape = self.out.flops(shape)
        return f + g, shape


def build_discriminator(cfg: DiscConfig, seed: int = 0) -> Discriminator:
    return Discriminator(cfg, seed)


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"RMCKPT01"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], cfg_digest: bytes = b"\0" * 32) -> None:
    """Header (magic, u32 version, 32-byte config hash, u32 count) then records.

    Each record: u32 name length, utf-8 name, u32 ndim, u32 dims, float64
    little-endian values.
    """
    if len(cfg_digest) != 32:
        raise ValueError("config hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(cfg_digest)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path, expect_hash: bytes | None = None) -> tuple[dict[str, np.ndarray], bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[12:44]
    if expect_hash is not None and digest != expect_hash:
        raise ValueError(f"{path}: config hash mismatch")
    (count,) = struct.unpack_from("<I", blob, 44)
    off = 48
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(blob):
                raise ValueError("truncated")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out, digest
